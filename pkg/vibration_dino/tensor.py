# -*- coding: utf-8 -*-

"""
Dense tensor operations with reverse-mode differentiation.

Tensors are :py:class:`torch.Tensor` values and the graph is torch's
autograd tape. The functions here fix the semantics the models rely on:
shape rules, the GeLU variant, normalization epsilons, single-use
graphs, the Adam update and the ``TENSRCKP`` checkpoint format.
"""

import contextlib
import logging
import math
import struct
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F

from vibration_dino.exceptions import ContractError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'TENSRCKP'

GELU_COEFFICIENT = 0.045
"""
Cubic coefficient of the tanh GeLU approximation. The widely used
value is 0.044715; 0.045 is kept on purpose.
"""

PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


def set_precision(name):
    """
    Sets the default floating point precision for newly created tensors

    :param name: ``float32`` or ``float64``
    :type name: str
    """
    if name not in PRECISIONS:
        raise ContractError('Unknown precision: ' + str(name))
    torch.set_default_dtype(PRECISIONS[name])


@contextlib.contextmanager
def precision(name):
    """
    Context manager that switches the default precision and restores
    the previous one on exit
    """
    previous = torch.get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@contextlib.contextmanager
def seeded(seed):
    """
    Runs the body with torch's global generator seeded to ``seed``
    without disturbing the generator state outside
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def as_tensor(data, requires_grad=False):
    """
    Creates a leaf tensor in the default precision
    """
    t = torch.as_tensor(np.asarray(data), dtype=torch.get_default_dtype()).clone()
    t.requires_grad_(requires_grad)
    return t


def _check_broadcast(a, b, opname):
    """
    Elementwise operands must have equal shapes, or one must be a
    scalar, or their trailing dimensions must match (leading batch
    dimensions broadcast)
    """
    sa = tuple(a.shape) if isinstance(a, torch.Tensor) else ()
    sb = tuple(b.shape) if isinstance(b, torch.Tensor) else ()
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(opname + ': incompatible shapes ' + str(sa) + ' and ' + str(sb))


def matmul(a, b):
    """
    Batched matrix product ``[..., m, k] x [..., k, n] -> [..., m, n]``

    :raises ShapeError: naming both shapes when inner or batch
                        dimensions do not agree
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError('matmul needs operands of rank >= 2, got ' +
                         str(tuple(a.shape)) + ' and ' + str(tuple(b.shape)))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul inner dimensions differ: ' + str(tuple(a.shape)) +
                         ' and ' + str(tuple(b.shape)))
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise ShapeError('matmul batch dimensions do not broadcast: ' +
                         str(tuple(a.shape)) + ' and ' + str(tuple(b.shape)))
    return torch.matmul(a, b)


def softmax(x, axis=-1):
    """
    Softmax along ``axis`` with the row maximum subtracted first
    """
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x, axis=-1):
    """
    Log of :py:func:`softmax`, computed without forming the ratio
    """
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def gelu(x):
    """
    ``0.5 x (1 + tanh(sqrt(2 / pi) (x + 0.045 x^3)))``
    """
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) *
                                       (x + GELU_COEFFICIENT * x ** 3)))


def layer_norm(x, gain, bias, eps=1e-5):
    """
    Normalizes over the last axis then applies ``gain`` and ``bias``

    :raises ShapeError: if gain or bias do not match the last axis
    """
    d = x.shape[-1]
    if tuple(gain.shape) != (d,) or tuple(bias.shape) != (d,):
        raise ShapeError('layer_norm gain/bias shapes ' + str(tuple(gain.shape)) + ', ' +
                         str(tuple(bias.shape)) + ' do not match last axis ' + str(d))
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def add(a, b):
    _check_broadcast(a, b, 'add')
    return a + b


def sub(a, b):
    _check_broadcast(a, b, 'sub')
    return a - b


def mul(a, b):
    _check_broadcast(a, b, 'mul')
    return a * b


def scale(x, alpha):
    return x * alpha


def exp(x):
    return torch.exp(x)


def log(x):
    return torch.log(x)


def l2_normalize(x, axis=-1, eps=1e-6):
    """
    ``x / max(||x||_2, eps)`` along ``axis``
    """
    return F.normalize(x, p=2.0, dim=axis, eps=eps)


def concat(tensors, axis=0):
    """
    Concatenates along ``axis``

    :raises ShapeError: if the other dimensions differ
    """
    shapes = [tuple(t.shape) for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref))
                                     if i != axis % len(ref)):
            raise ShapeError('concat shapes do not agree: ' + str(shapes))
    return torch.cat(tensors, dim=axis)


def slice_axis(x, axis, start, stop):
    """
    Elements ``start:stop`` along ``axis``
    """
    return x.narrow(axis, start, stop - start)


def transpose(x, axis0=-2, axis1=-1):
    return x.transpose(axis0, axis1)


def reshape(x, shape):
    """
    :raises ShapeError: if the element count changes
    """
    if int(np.prod(shape)) != x.numel():
        raise ShapeError('Cannot reshape ' + str(tuple(x.shape)) + ' to ' + str(tuple(shape)))
    return x.reshape(shape)


def reduce_sum(x, axis=None, keepdims=False):
    if axis is None:
        return x.sum()
    return x.sum(dim=axis, keepdim=keepdims)


def reduce_mean(x, axis=None, keepdims=False):
    if axis is None:
        return x.mean()
    return x.mean(dim=axis, keepdim=keepdims)


def stop_gradient(x):
    """
    Same values, no gradient flows back through the result
    """
    return x.detach()


def backward(loss):
    """
    Populates ``.grad`` of every leaf that requires it. Graphs are
    single use: a second call on the same graph raises.

    :raises ContractError: if ``loss`` is not a scalar or its graph
                           was already consumed
    """
    if loss.numel() != 1:
        raise ContractError('backward needs a scalar loss, got shape ' + str(tuple(loss.shape)))
    if not loss.requires_grad:
        raise ContractError('loss does not depend on any parameter that requires grad')
    try:
        loss.backward()
    except RuntimeError as re:
        raise ContractError('Graph cannot be replayed: ' + str(re))


def assert_finite(t, what='tensor'):
    """
    :raises ContractError: if ``t`` holds NaN or infinity
    """
    if not bool(torch.isfinite(t).all()):
        raise ContractError(what + ' contains non finite values')


def make_optimizer(params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """
    Adam with decoupled weight decay: ``p <- p - lr * wd * p`` is applied
    before the bias corrected Adam update

    :rtype: :py:class:`torch.optim.AdamW`
    """
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def adam_step(optimizer, lr=None, max_grad_norm=None):
    """
    One update of every parameter held by ``optimizer`` using the
    gradients currently stored on the parameters

    :param optimizer: from :py:func:`make_optimizer`
    :param lr: if set, replaces the learning rate of every group first
    :param max_grad_norm: optional global gradient norm clip
    """
    if lr is not None:
        for group in optimizer.param_groups:
            group['lr'] = lr
    if max_grad_norm is not None:
        params = [p for g in optimizer.param_groups for p in g['params'] if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, max_grad_norm)
    optimizer.step()


def save_checkpoint(path, tensors):
    """
    Writes named tensors in the ``TENSRCKP`` format: magic, u32 count,
    then per entry u16 name length, UTF-8 name, u8 rank, rank x u32
    dims and float32 payload, all little-endian

    :param tensors: mapping of name to tensor or array
    :type tensors: dict
    """
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(tensors)))
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.asarray(value)
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<B', arr.ndim))
            f.write(struct.pack('<' + 'I' * arr.ndim, *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype='<f4').tobytes())
    logger.debug('Wrote ' + str(len(tensors)) + ' tensors to ' + str(path))


def load_checkpoint(path):
    """
    Reads a ``TENSRCKP`` file

    :raises ParseError: with the byte offset of the problem
    :return: name to float32 tensor, in file order
    :rtype: :py:class:`collections.OrderedDict`
    """
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(str(path) + ': not a TENSRCKP checkpoint', offset=0)
    pos = len(CHECKPOINT_MAGIC)
    res = OrderedDict()
    try:
        (count,) = struct.unpack_from('<I', data, pos)
        pos += 4
        for _ in range(count):
            (namelen,) = struct.unpack_from('<H', data, pos)
            pos += 2
            name = data[pos:pos + namelen].decode('utf-8')
            pos += namelen
            (rank,) = struct.unpack_from('<B', data, pos)
            pos += 1
            dims = struct.unpack_from('<' + 'I' * rank, data, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank > 0 else 1
            if pos + 4 * n > len(data):
                raise ParseError(str(path) + ': truncated payload for ' + name, offset=pos)
            arr = np.frombuffer(data, dtype='<f4', count=n, offset=pos).reshape(dims)
            pos += 4 * n
            res[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, UnicodeDecodeError):
        raise ParseError(str(path) + ': malformed checkpoint entry', offset=pos)
    if pos != len(data):
        raise ParseError(str(path) + ': trailing bytes after last entry', offset=pos)
    return res
