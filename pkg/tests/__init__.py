# -*- coding: utf-8 -*-

"""Unit test package for vibration_dino."""
