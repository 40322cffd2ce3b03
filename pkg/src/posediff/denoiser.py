"""Prompt-driven denoiser: maps (noisy 3D pose, 2D keypoints, timestamp,
prompt matrix) to a clean 3D pose estimate.

Pipeline per forward pass: per-joint input embedding (+ pooled prompt and
timestamp vectors), spatial self-attention over joints, cross-attention from
pose tokens to the 77 prompt rows, prompt/timestamp feature stylization,
temporal self-attention over frames, three further spatial-temporal blocks,
and a linear 3D decode head. All blocks are pre-norm residual transformer
layers and preserve the N x J x D feature shape.

The three conditioning stages can be disabled independently (ablation
plumbing): ``use_fpp`` gates the prompt bank entirely, ``use_fpc`` the
cross-attention, ``use_pts`` the stylization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, gelu, layer_norm, linear, softmax
from .exceptions import ConfigError, NumericsError, ShapeError
from .prompts import TOTAL_TOKENS, PromptEmbedding
from .rng import gaussian

__all__ = ["DenoiserConfig", "Denoiser", "init_denoiser_weights", "sinusoid_embedding"]

WEIGHT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    n_frames: int
    n_joints: int
    feature_dim: int = 512
    heads: int = 8
    blocks_spatial: int = 1
    blocks_temporal: int = 1
    blocks_spatio_temporal: int = 3
    mlp_ratio: float = 2.0
    use_fpp: bool = True
    use_fpc: bool = True
    use_pts: bool = True

    def __post_init__(self):
        if self.feature_dim % self.heads != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} not divisible by heads {self.heads}"
            )
        if self.feature_dim % 2 != 0:
            raise ConfigError("feature_dim must be even for the sinusoidal embedding")
        if min(self.n_frames, self.n_joints) < 1:
            raise ConfigError("n_frames and n_joints must be >= 1")

    @property
    def head_dim(self):
        return self.feature_dim // self.heads

    def block_names(self):
        names = [f"spatial{i}" for i in range(self.blocks_spatial)]
        names += [f"temporal{i}" for i in range(self.blocks_temporal)]
        for i in range(self.blocks_spatio_temporal):
            names += [f"st{i}/spatial", f"st{i}/temporal"]
        return names


def _attention_weight_shapes(d):
    return {
        "ln/scale": (d,),
        "ln/offset": (d,),
        "wq": (d, d),
        "bq": (d,),
        "wk": (d, d),
        "bk": (d,),
        "wv": (d, d),
        "bv": (d,),
        "wo": (d, d),
        "bo": (d,),
    }


def weight_shapes(config: DenoiserConfig) -> dict:
    """Canonical name -> shape map fully determined by the config."""
    d = config.feature_dim
    hidden = int(round(config.mlp_ratio * d))
    shapes = {
        "input/proj/w": (5, d),
        "input/proj/b": (d,),
        "input/pos_spatial": (config.n_joints, d),
        "input/pos_temporal": (config.n_frames, d),
        "time/fc1/w": (d, d),
        "time/fc1/b": (d,),
        "time/fc2/w": (d, d),
        "time/fc2/b": (d,),
        "head/w": (d, 3),
        "head/b": (3,),
    }
    for blk in config.block_names():
        for suffix, shape in _attention_weight_shapes(d).items():
            shapes[f"{blk}/attn/{suffix}"] = shape
        shapes[f"{blk}/mlp/ln/scale"] = (d,)
        shapes[f"{blk}/mlp/ln/offset"] = (d,)
        shapes[f"{blk}/mlp/fc1/w"] = (d, hidden)
        shapes[f"{blk}/mlp/fc1/b"] = (hidden,)
        shapes[f"{blk}/mlp/fc2/w"] = (hidden, d)
        shapes[f"{blk}/mlp/fc2/b"] = (d,)
    if config.use_fpp and config.use_fpc:
        for suffix, shape in _attention_weight_shapes(d).items():
            shapes[f"cross/{suffix}"] = shape
    if config.use_pts:
        for name in ("phi", "psi_w", "psi_b"):
            shapes[f"pts/{name}/w"] = (d, d)
            shapes[f"pts/{name}/b"] = (d,)
    return shapes


def init_denoiser_weights(config: DenoiserConfig, seed: int, dtype=np.float64) -> dict:
    """Gaussian(0, 0.02) projections, identity layer norms, zero biases.

    The stylization scale branch starts at an all-ones bias so the block is
    the identity map at initialization.
    """
    dtype = np.dtype(dtype)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith("ln/scale") or name == "pts/psi_w/b":
            value = np.ones(shape, dtype=dtype)
        elif name.endswith(("/b", "/offset", "bq", "bk", "bv", "bo")):
            value = np.zeros(shape, dtype=dtype)
        else:
            value = WEIGHT_STD * gaussian(shape, seed, "weight", name, dtype=dtype)
        weights[name] = value
    return weights


def sinusoid_embedding(t: float, dim: int) -> np.ndarray:
    """Interleaved sin/cos positional code of scalar t; t=0 gives [0,1,0,1,...]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    emb = np.empty(dim)
    emb[0::2] = np.sin(t * freqs)
    emb[1::2] = np.cos(t * freqs)
    return emb


class Denoiser:
    """Denoiser network over a named weight map.

    Forward passes are pure functions of (inputs, weights): multiple
    hypotheses may call ``denoise`` concurrently against one weight snapshot,
    while training mutates the weights between batches under exclusive access.
    """

    def __init__(self, config: DenoiserConfig, weights: dict):
        self.config = config
        expected = weight_shapes(config)
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ConfigError(f"weight map mismatch: missing={missing} extra={extra}")
        self.weights = {
            name: w if isinstance(w, Tensor) else Tensor(w, requires_grad=True)
            for name, w in weights.items()
        }
        for name, w in self.weights.items():
            if tuple(w.shape) != tuple(expected[name]):
                raise ShapeError(
                    f"weight {name!r}: shape {w.shape}, expected {expected[name]}"
                )
        self.dtype = self.weights["head/w"].data.dtype

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0, dtype=np.float64):
        return cls(config, init_denoiser_weights(config, seed, dtype))

    def _w(self, name):
        return self.weights[name]

    # -- conditioning --------------------------------------------------------

    def timestamp_embed(self, t: float) -> Tensor:
        """Sinusoidal code of t through linear-GELU-linear; returns (1, D)."""
        sin = sinusoid_embedding(float(t), self.config.feature_dim)
        h = linear(Tensor(sin[None].astype(self.dtype)), self._w("time/fc1/w"), self._w("time/fc1/b"))
        return linear(gelu(h), self._w("time/fc2/w"), self._w("time/fc2/b"))

    def embed_input(self, yt, x, t, prompt: PromptEmbedding | None) -> Tensor:
        """Concat(3D, 2D) per joint token -> D, plus positional/prompt/time terms."""
        yt = np.asarray(yt)
        x = np.asarray(x)
        if yt.ndim != 3 or yt.shape[2] != 3 or x.ndim != 3 or x.shape[2] != 2:
            raise ShapeError(f"expected (N,J,3) and (N,J,2), got {yt.shape} and {x.shape}")
        if yt.shape[:2] != x.shape[:2]:
            raise ShapeError(f"pose/keypoint frame-joint mismatch: {yt.shape} vs {x.shape}")
        cfg = self.config
        if yt.shape[:2] != (cfg.n_frames, cfg.n_joints):
            raise ShapeError(
                f"input is {yt.shape[:2]}, config expects {(cfg.n_frames, cfg.n_joints)}"
            )
        tok = concat(
            [Tensor(yt.astype(self.dtype)), Tensor(x.astype(self.dtype))], axis=-1
        )
        z = linear(tok, self._w("input/proj/w"), self._w("input/proj/b"))
        z = z + self._w("input/pos_spatial")
        if cfg.use_fpp:
            if prompt is None:
                raise ConfigError("prompt conditioning enabled but no prompt given")
            z = z + prompt.pooled
        return z + self.timestamp_embed(t)

    # -- attention blocks ----------------------------------------------------

    def _split_heads(self, x: Tensor) -> Tensor:
        # (..., S, D) -> (..., H, S, d)
        cfg = self.config
        lead = x.shape[:-1]
        x = x.reshape(*lead, cfg.heads, cfg.head_dim)
        axes = tuple(range(x.ndim))
        return x.permute(axes[:-3] + (axes[-2], axes[-3], axes[-1]))

    def _merge_heads(self, x: Tensor) -> Tensor:
        # (..., H, S, d) -> (..., S, D)
        axes = tuple(range(x.ndim))
        x = x.permute(axes[:-3] + (axes[-2], axes[-3], axes[-1]))
        return x.reshape(*x.shape[:-2], self.config.feature_dim)

    def _self_attention(self, x: Tensor, prefix: str, attn_sink=None) -> Tensor:
        """Pre-norm residual MHSA over the second-to-last axis of (B, S, D)."""
        w = self._w
        h = layer_norm(x, w(f"{prefix}/ln/scale"), w(f"{prefix}/ln/offset"), LN_EPS)
        q = self._split_heads(linear(h, w(f"{prefix}/wq"), w(f"{prefix}/bq")))
        k = self._split_heads(linear(h, w(f"{prefix}/wk"), w(f"{prefix}/bk")))
        v = self._split_heads(linear(h, w(f"{prefix}/wv"), w(f"{prefix}/bv")))
        scale = 1.0 / math.sqrt(self.config.head_dim)
        attn = softmax(q @ k.permute(0, 1, 3, 2) * scale, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        out = self._merge_heads(attn @ v)
        return x + linear(out, w(f"{prefix}/wo"), w(f"{prefix}/bo"))

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        w = self._w
        h = layer_norm(x, w(f"{prefix}/ln/scale"), w(f"{prefix}/ln/offset"), LN_EPS)
        h = gelu(linear(h, w(f"{prefix}/fc1/w"), w(f"{prefix}/fc1/b")))
        return x + linear(h, w(f"{prefix}/fc2/w"), w(f"{prefix}/fc2/b"))

    def mhsa_block(self, f: Tensor, axis: str, block: str, attn_sink=None) -> Tensor:
        """One transformer block; ``axis`` picks joint-wise or frame-wise attention."""
        if axis == "spatial":
            f = self._self_attention(f, f"{block}/attn", attn_sink)
        elif axis == "temporal":
            f = f.permute(1, 0, 2)
            f = self._self_attention(f, f"{block}/attn", attn_sink)
            f = f.permute(1, 0, 2)
        else:
            raise ConfigError(f"unknown attention axis {axis!r}")
        f = self._mlp(f, f"{block}/mlp")
        if not np.isfinite(f.data).all():
            raise NumericsError(f"non-finite activations after block {block!r}")
        return f

    def prompt_cross_attention(self, f: Tensor, prompt: PromptEmbedding, attn_sink=None) -> Tensor:
        """Inject the 77 prompt rows into pose tokens; residual + output projection."""
        if prompt.tokens.shape != (TOTAL_TOKENS, self.config.feature_dim):
            raise ShapeError(
                f"prompt matrix is {prompt.tokens.shape}, expected "
                f"({TOTAL_TOKENS}, {self.config.feature_dim})"
            )
        w = self._w
        n, j, d = f.shape
        flat = f.reshape(n * j, d)
        h = layer_norm(flat, w("cross/ln/scale"), w("cross/ln/offset"), LN_EPS)
        q = self._split_heads(linear(h, w("cross/wq"), w("cross/bq")))
        k = self._split_heads(linear(prompt.tokens, w("cross/wk"), w("cross/bk")))
        v = self._split_heads(linear(prompt.tokens, w("cross/wv"), w("cross/bv")))
        scale = 1.0 / math.sqrt(self.config.head_dim)
        attn = softmax(q @ k.permute(0, 2, 1) * scale, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        out = self._merge_heads(attn @ v)
        out = flat + linear(out, w("cross/wo"), w("cross/bo"))
        return out.reshape(n, j, d)

    def pts_stylize(self, f: Tensor, prompt: PromptEmbedding | None, t) -> Tensor:
        """Scale-and-offset features with a prompt+timestamp vector."""
        w = self._w
        v = self.timestamp_embed(t)
        if self.config.use_fpp and prompt is not None:
            v = prompt.pooled + v
        base = linear(v, w("pts/phi/w"), w("pts/phi/b"))
        scale = linear(base, w("pts/psi_w/w"), w("pts/psi_w/b"))
        offset = linear(base, w("pts/psi_b/w"), w("pts/psi_b/b"))
        return f * scale + offset

    def spatio_temporal_stack(self, f: Tensor) -> Tensor:
        for i in range(self.config.blocks_spatio_temporal):
            f = self.mhsa_block(f, "spatial", f"st{i}/spatial")
            f = self.mhsa_block(f, "temporal", f"st{i}/temporal")
        return f

    def decode_head(self, f: Tensor) -> Tensor:
        return linear(f, self._w("head/w"), self._w("head/b"))

    # -- full forward ----------------------------------------------------------

    def denoise(self, yt, x, t, prompt: PromptEmbedding | None = None) -> Tensor:
        """Full forward pass; returns the predicted clean pose as (N, J, 3)."""
        cfg = self.config
        f = self.embed_input(yt, x, t, prompt)
        for i in range(cfg.blocks_spatial):
            f = self.mhsa_block(f, "spatial", f"spatial{i}")
        if cfg.use_fpp and cfg.use_fpc:
            f = self.prompt_cross_attention(f, prompt)
        if cfg.use_pts:
            f = self.pts_stylize(f, prompt, t)
        f = f + self._w("input/pos_temporal").reshape(cfg.n_frames, 1, cfg.feature_dim)
        for i in range(cfg.blocks_temporal):
            f = self.mhsa_block(f, "temporal", f"temporal{i}")
        f = self.spatio_temporal_stack(f)
        return self.decode_head(f)

    def denoise_array(self, yt, x, t, prompt=None) -> np.ndarray:
        """Inference convenience: no graph construction, plain ndarray out."""
        from .autodiff import no_grad

        with no_grad():
            return self.denoise(yt, x, t, prompt).data

    def trainable(self) -> dict:
        return dict(self.weights)
