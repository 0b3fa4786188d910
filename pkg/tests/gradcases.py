"""Gradient-check cases shared by the unit tests and the acceptance suite.

Each builder takes a dtype and returns ``(scalar_fn, point)`` for grad_check.
"""
import numpy as np

from anyxr import nn
from anyxr import tensor as T
from anyxr.denoisers import EnvEncoder, ImageUNet, TextDenoiser
from anyxr.tensor import Tensor

TOLERANCE = {np.float64: 1e-6, np.float32: 1e-4}


def _rng(seed):
    return np.random.default_rng(seed)


def _const(a, dtype):
    return Tensor(np.asarray(a), dtype=dtype)


def _unary(fn, seed=11):
    def build(dtype):
        return (lambda t: fn(t, dtype).sum()), _rng(seed).standard_normal((2, 3)).astype(dtype)
    return build


def _conv(dtype):
    k = _const(_rng(9).standard_normal((3, 2, 3, 3)), dtype)
    return (lambda t: (T.conv2d(t, k, pad=1) ** 2).sum()), _rng(8).standard_normal((1, 2, 5, 5)).astype(dtype)


def _conv_strided(dtype):
    k = _const(_rng(19).standard_normal((2, 2, 3, 3)), dtype)
    return (lambda t: (T.conv2d(t, k, stride=2, pad=1) ** 2).sum()), \
        _rng(18).standard_normal((1, 2, 6, 6)).astype(dtype)


def _cross_attention(dtype):
    rng = _rng(10)
    ctx = _const(rng.standard_normal((5, 4)), dtype)
    projs = [_const(rng.standard_normal((4, 4)) * 0.5, dtype) for _ in range(4)]
    return (lambda t: (nn.cross_attention(t, ctx, *projs) ** 2).sum()), rng.standard_normal((3, 4)).astype(dtype)


def _matmul(dtype):
    rng = _rng(13)
    b = _const(rng.standard_normal((3, 4)), dtype)
    return (lambda t: ((t @ b) ** 2).sum()), rng.standard_normal((2, 3)).astype(dtype)


def _embedding(dtype):
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    return (lambda w: (T.embedding(w, ids) ** 2).sum()), _rng(13).standard_normal((4, 3)).astype(dtype)


def _group_norm(dtype):
    g = _const(np.linspace(0.5, 2.0, 4), dtype)
    b = _const(np.zeros(4), dtype)
    w = _const(_rng(15).standard_normal((2, 4, 3, 3)), dtype)
    return (lambda t: (nn.group_norm(t, 2, g, b) * w).sum()), _rng(14).standard_normal((2, 4, 3, 3)).astype(dtype)


PRIMITIVES = {
    "exp": _unary(lambda t, d: T.exp(t)),
    "tanh": _unary(lambda t, d: T.tanh(t)),
    "sigmoid": _unary(lambda t, d: T.sigmoid(t)),
    "silu": _unary(lambda t, d: T.silu(t)),
    "softplus": _unary(lambda t, d: T.softplus(t)),
    "log": _unary(lambda t, d: T.log(t * t + 1.0)),
    "sqrt": _unary(lambda t, d: T.sqrt(t * t + 1.0)),
    "softmax": _unary(lambda t, d: T.softmax(t, axis=-1) * _const(np.arange(1.0, 4.0), d)),
    "log_softmax": _unary(lambda t, d: T.log_softmax(t, axis=-1) * _const(np.arange(1.0, 4.0), d)),
    "upsample": _unary(lambda t, d: T.upsample2x(t.reshape(1, 1, 2, 3)) ** 2),
    "mean": _unary(lambda t, d: t.mean(axis=0) ** 2),
    "transpose": _unary(lambda t, d: t.transpose(1, 0) * _const(np.arange(6.0).reshape(3, 2), d)),
    "getitem": _unary(lambda t, d: t[1:, ::2] ** 2),
    "concat": _unary(lambda t, d: T.concat([t, t * 2.0], axis=1) ** 2),
    "power": _unary(lambda t, d: (t * t + 1.0) ** 1.5),
    "div": _unary(lambda t, d: t / (t * t + 2.0)),
    "layer_norm": _unary(lambda t, d: nn.layer_norm(t, _const(np.arange(1.0, 4.0), d),
                                                    _const(np.zeros(3), d)) ** 3),
    "l2_normalize": _unary(lambda t, d: nn.l2_normalize(t) * _const(np.arange(1.0, 4.0), d)),
    "conv2d": _conv,
    "conv2d_stride2": _conv_strided,
    "cross_attention": _cross_attention,
    "matmul": _matmul,
    "embedding": _embedding,
    "group_norm": _group_norm,
}


# ---------------------------------------------------------------------------
# full networks, with their cross-modal layers moved off zero
# ---------------------------------------------------------------------------

def perturb_xmod(net, rng):
    for name, p in net.named_parameters():
        if "xmod" in name:
            p.data = (p.data + rng.normal(0, 0.3, p.shape)).astype(p.dtype)


def small_unet(seed=0):
    return ImageUNet(_rng(seed), c_z=2, width=8, d_p=4, d_s=4, d_emb=8, latent_side=4)


def small_text(seed=0, d_t=4):
    return TextDenoiser(_rng(seed), d_t=d_t, d_p=4, d_s=4, depth=2, d_emb=8, groups=4)


def _image_denoiser(dtype):
    net = small_unet(10)
    rng = _rng(11)
    perturb_xmod(net, rng)
    net.astype(dtype)
    z = rng.standard_normal((1, 2, 4, 4)).astype(dtype)
    c = _const(rng.standard_normal((1, 4)), dtype)
    env = _const(rng.standard_normal((1, 2, 4)), dtype)
    return (lambda x: (net(x, np.array([1]), c, env) ** 2).mean()), z


def _text_denoiser(dtype):
    net = small_text(14)
    rng = _rng(15)
    perturb_xmod(net, rng)
    net.astype(dtype)
    c = _const(rng.standard_normal((2, 4)), dtype)
    env = _const(rng.standard_normal((2, 1, 4)), dtype)
    return (lambda z: (net(z, np.array([3, 9]), c, env) ** 2).mean()), rng.standard_normal((2, 4)).astype(dtype)


def _env_encoder(dtype):
    rng = _rng(16)
    enc = EnvEncoder(rng, (2, 4, 4), d_s=4, width=8).astype(dtype)
    w = rng.standard_normal((1, 4, 4))
    return (lambda z: (enc(z) * _const(w[0, 0], dtype)).sum() + (enc.context(z) * _const(w, dtype)).sum()), \
        rng.standard_normal((1, 2, 4, 4)).astype(dtype)


DENOISERS = {
    "image_unet": _image_denoiser,
    "text_denoiser": _text_denoiser,
    "env_encoder": _env_encoder,
}


UNET_PARAMETERS = {
    "temb.fc1.w": lambda net: (net.temb.fc1, "w"),
    "xmod_lo.q": lambda net: (net.xmod_lo.attn, "q"),
    "xmod_hi.pos": lambda net: (net.xmod_hi, "pos"),
    "down.c1.w": lambda net: (net.down.c1, "w"),
}


def unet_parameter_case(name, dtype=np.float64):
    """Probe one UNet weight tensor, on a fresh network, at a mid-range step."""
    net = small_unet(12)
    rng = _rng(13)
    perturb_xmod(net, rng)
    net.astype(dtype)
    z = _const(rng.standard_normal((1, 2, 4, 4)), dtype)
    c = _const(rng.standard_normal((1, 4)), dtype)
    env = _const(rng.standard_normal((1, 2, 4)), dtype)
    # mid-range t keeps the sinusoidal features (and so fc1's gradient rows) away from zero
    t = np.array([37])
    layer, attr = UNET_PARAMETERS[name](net)

    def f(w):
        setattr(layer, attr, w)
        return (net(z, t, c, env) ** 2).mean()
    return f, getattr(layer, attr).data.copy()
