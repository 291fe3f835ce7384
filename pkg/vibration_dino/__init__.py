# -*- coding: utf-8 -*-

"""Top-level package for vibration_dino."""

__author__ = 'Vibration DINO team'
__email__ = 'tools@vibration-dino.org'
__version__ = '0.1.0'
__repo_url__ = 'https://github.com/vibration-dino/vibration_dino'
__description__ = 'Limited-label bearing fault diagnosis with wavelet time-frequency maps and self-distillation'
__computation_name__ = 'Vibration DINO'
