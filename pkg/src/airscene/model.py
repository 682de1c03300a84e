"""Multi-aircraft trajectory transformer with recorded attention.

Each aircraft's past is embedded one axis at a time: the whole length-T
series of one coordinate becomes a single d_model token through a per-axis
affine map shared across aircraft.  Tokens then pass through two attention
stages: variate attention restricted to each aircraft's own three axis
tokens, then, after mean-pooling to one token per aircraft, attention across
aircraft.  Two MLP heads decode every aircraft token into a future
trajectory and a reconstruction of its past.

All attention weights are captured per head and returned alongside the
outputs; the aircraft-stage weights are what the explanation tools rank.
Padding slots are masked out of every softmax and re-zeroed after every
sublayer, so a padded slot contributes exactly nothing to valid aircraft.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import SceneWindow, check_scene
from .numerics import Var
from .seeding import derive_seed

N_AXES = 3  # x, y, z tokens per aircraft


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_variate_layers: int = 2
    n_aircraft_layers: int = 2
    ffn_hidden: int = 128
    mlp_hidden: int = 128
    T: int = 24
    H: int = 12
    ln_eps: float = 1e-8

    def __post_init__(self):
        dims = (self.d_model, self.n_heads, self.n_variate_layers,
                self.n_aircraft_layers, self.ffn_hidden, self.mlp_hidden,
                self.T, self.H)
        if any(d < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} must divide evenly into {self.n_heads} heads"
            )
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_variate_layers": self.n_variate_layers,
            "n_aircraft_layers": self.n_aircraft_layers,
            "ffn_hidden": self.ffn_hidden, "mlp_hidden": self.mlp_hidden,
            "T": self.T, "H": self.H, "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionRecord:
    """Per-head attention weights captured from one layer.

    ``weights`` has shape (n_heads, M, M) where M is 3N for variate layers
    and N for aircraft layers; rows are queries, columns keys.  Rows and
    columns of padding slots are exactly zero.
    """

    kind: str       # "variate" | "aircraft"
    layer: int
    weights: np.ndarray


@dataclass
class SceneOutput:
    """Forward products for one scene, in normalized units."""

    pred: np.ndarray                    # (N, H, 3)
    recon: np.ndarray                   # (N, T, 3)
    attention: list[AttentionRecord]

    def aircraft_records(self) -> list[AttentionRecord]:
        return [r for r in self.attention if r.kind == "aircraft"]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _layer_spec(prefix: str, d: int, f: int) -> list[tuple[str, tuple[int, int]]]:
    spec = []
    for p in ("q", "k", "v", "o"):
        spec.append((f"{prefix}.attn.W{p}", (d, d)))
        spec.append((f"{prefix}.attn.b{p}", (1, d)))
    spec += [
        (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.ffn.W1", (d, f)), (f"{prefix}.ffn.b1", (1, f)),
        (f"{prefix}.ffn.W2", (f, d)), (f"{prefix}.ffn.b2", (1, d)),
        (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
    ]
    return spec


def params_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Ordered (name, shape) pairs for every trainable tensor."""
    spec = []
    for a in range(N_AXES):
        spec.append((f"embed.axis{a}.W", (cfg.T, cfg.d_model)))
        spec.append((f"embed.axis{a}.b", (1, cfg.d_model)))
    for l in range(cfg.n_variate_layers):
        spec += _layer_spec(f"var{l}", cfg.d_model, cfg.ffn_hidden)
    for l in range(cfg.n_aircraft_layers):
        spec += _layer_spec(f"ac{l}", cfg.d_model, cfg.ffn_hidden)
    for head, width in (("pred", N_AXES * cfg.H), ("recon", N_AXES * cfg.T)):
        spec += [
            (f"{head}.W1", (cfg.d_model, cfg.mlp_hidden)),
            (f"{head}.b1", (1, cfg.mlp_hidden)),
            (f"{head}.W2", (cfg.mlp_hidden, width)),
            (f"{head}.b2", (1, width)),
        ]
    return spec


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Var]:
    """Scaled-uniform fan-in init for weights, zeros for biases, ones for gains."""
    rng = np.random.default_rng(derive_seed(seed, "model-init"))
    params: dict[str, Var] = {}
    for name, shape in params_spec(cfg):
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W"):
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = nm.param(arr)
    return params


def check_params(params: dict[str, Var], cfg: ModelConfig) -> None:
    spec = dict(params_spec(cfg))
    missing = sorted(set(spec) - set(params))
    extra = sorted(set(params) - set(spec))
    if missing or extra:
        raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
    for name, var in params.items():
        if var.shape != spec[name]:
            raise ValueError(f"{name}: shape {var.shape}, expected {spec[name]}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def scaled_dot_attention(
    q: Var, k: Var, v: Var, mask: np.ndarray | None = None
) -> tuple[Var, Var]:
    """Classic scaled dot-product attention.

    ``mask`` is a boolean (n_q, n_k) array, True where a query may attend;
    disallowed entries get an additive penalty large enough that their
    softmax weight underflows to exactly zero.  Returns (output, weights).
    """
    d_k = q.shape[1]
    scores = nm.matmul_t(q, k) * (1.0 / math.sqrt(d_k))
    weights = nm.softmax_rows(scores, mask=mask)
    return weights @ v, weights


def _attention_block(
    x: Var, params: dict[str, Var], prefix: str, n_heads: int, mask: np.ndarray
) -> tuple[Var, np.ndarray]:
    """Multi-head attention with output projection; returns per-head weights."""
    d = x.shape[1]
    dk = d // n_heads
    q = x @ params[f"{prefix}.Wq"] + params[f"{prefix}.bq"]
    k = x @ params[f"{prefix}.Wk"] + params[f"{prefix}.bk"]
    v = x @ params[f"{prefix}.Wv"] + params[f"{prefix}.bv"]
    outs, caps = [], []
    for h in range(n_heads):
        lo, hi = h * dk, (h + 1) * dk
        out_h, w_h = scaled_dot_attention(
            nm.cols(q, lo, hi), nm.cols(k, lo, hi), nm.cols(v, lo, hi), mask
        )
        outs.append(out_h)
        caps.append(np.array(w_h.value))
    merged = nm.concat_cols(outs) @ params[f"{prefix}.Wo"] + params[f"{prefix}.bo"]
    return merged, np.stack(caps)


def _transformer_layer(
    x: Var,
    params: dict[str, Var],
    prefix: str,
    cfg: ModelConfig,
    attn_mask: np.ndarray,
    keep: Var,
) -> tuple[Var, np.ndarray]:
    """Post-norm attention + FFN sublayers; padding rows re-zeroed after each."""
    attn_out, caps = _attention_block(x, params, f"{prefix}.attn", cfg.n_heads, attn_mask)
    x = nm.layer_norm(x + attn_out, params[f"{prefix}.ln1.g"],
                      params[f"{prefix}.ln1.b"], eps=cfg.ln_eps)
    x = x * keep
    h = nm.gelu(x @ params[f"{prefix}.ffn.W1"] + params[f"{prefix}.ffn.b1"])
    ffn_out = h @ params[f"{prefix}.ffn.W2"] + params[f"{prefix}.ffn.b2"]
    x = nm.layer_norm(x + ffn_out, params[f"{prefix}.ln2.g"],
                      params[f"{prefix}.ln2.b"], eps=cfg.ln_eps)
    x = x * keep
    return x, caps


def _zero_pad_weights(caps: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Force rows and columns of padding slots to exact zeros."""
    caps = caps * keep[None, :, None]
    caps = caps * keep[None, None, :]
    return caps


def embed_variates(past: np.ndarray, params: dict[str, Var]) -> Var:
    """(N, T, 3) past positions -> (3N, d_model) tokens.

    Token 3i+a is aircraft i's axis-a series through the axis-a affine map;
    the maps are shared across aircraft, so the layout is permutation
    friendly by construction.
    """
    blocks = []
    for a in range(N_AXES):
        series = nm.const(np.ascontiguousarray(past[:, :, a]))     # (N, T)
        blocks.append(series @ params[f"embed.axis{a}.W"] + params[f"embed.axis{a}.b"])
    return nm.interleave_rows(blocks)


def variate_attention_mask(n_aircraft: int) -> np.ndarray:
    """Block-diagonal (3N, 3N) mask: tokens see only their own aircraft."""
    return np.kron(np.eye(n_aircraft, dtype=bool), np.ones((N_AXES, N_AXES), dtype=bool))


def masked_variate_attention_layer(
    x: Var, params: dict[str, Var], layer: int, cfg: ModelConfig, valid: np.ndarray
) -> tuple[Var, AttentionRecord]:
    """One transformer layer over axis tokens, isolated per aircraft."""
    n = valid.shape[0]
    token_keep = np.repeat(valid.astype(np.float64), N_AXES)
    x, caps = _transformer_layer(
        x, params, f"var{layer}", cfg, variate_attention_mask(n),
        nm.const(token_keep[:, None]),
    )
    return x, AttentionRecord("variate", layer, _zero_pad_weights(caps, token_keep))


def pool_aircraft(x: Var) -> Var:
    """Mean each aircraft's three axis tokens into one aircraft token."""
    return nm.group_mean_rows(x, N_AXES)


def aircraft_attention_layer(
    x: Var, params: dict[str, Var], layer: int, cfg: ModelConfig, valid: np.ndarray
) -> tuple[Var, AttentionRecord]:
    """One transformer layer across aircraft tokens; padded keys are masked."""
    n = valid.shape[0]
    keep = valid.astype(np.float64)
    # every row keeps at least the valid keys, so no row is fully masked
    mask = np.tile(valid, (n, 1))
    x, caps = _transformer_layer(
        x, params, f"ac{layer}", cfg, mask, nm.const(keep[:, None])
    )
    return x, AttentionRecord("aircraft", layer, _zero_pad_weights(caps, keep))


def _mlp_head(x: Var, params: dict[str, Var], prefix: str) -> Var:
    h = nm.gelu(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def forward_tape(
    past: np.ndarray,
    valid: np.ndarray,
    params: dict[str, Var],
    cfg: ModelConfig,
) -> tuple[Var, Var, list[AttentionRecord]]:
    """Differentiable forward pass on raw arrays.

    ``past`` is (N, T, 3) normalized positions with padding rows zeroed,
    ``valid`` the (N,) slot mask.  Returns flattened prediction (N, 3H) and
    reconstruction (N, 3T) variables plus the captured attention records.
    """
    if past.ndim != 3 or past.shape[2] != N_AXES:
        raise ValueError(f"past must be (N, T, 3), got {past.shape}")
    if past.shape[1] != cfg.T:
        raise ValueError(f"past has T={past.shape[1]}, model expects {cfg.T}")
    n = past.shape[0]
    if valid.shape != (n,):
        raise ValueError(f"valid must be ({n},), got {valid.shape}")
    if not valid.any():
        raise ValueError("scene has no valid aircraft")

    token_keep = nm.const(np.repeat(valid.astype(np.float64), N_AXES)[:, None])
    slot_keep = nm.const(valid.astype(np.float64)[:, None])
    records: list[AttentionRecord] = []

    x = embed_variates(past, params) * token_keep
    for l in range(cfg.n_variate_layers):
        x, rec = masked_variate_attention_layer(x, params, l, cfg, valid)
        records.append(rec)
    x = pool_aircraft(x) * slot_keep
    for l in range(cfg.n_aircraft_layers):
        x, rec = aircraft_attention_layer(x, params, l, cfg, valid)
        records.append(rec)
    # prediction extrapolates: the head emits per-step offsets from the last
    # observed position (anchor), so an untrained model already holds station.
    # reconstruction gets no such skip; it must pass through the token.
    anchor = np.where(valid[:, None], past[:, -1, :], 0.0)   # (N, 3)
    pred = (_mlp_head(x, params, "pred") + nm.const(np.tile(anchor, (1, cfg.H)))) * slot_keep
    recon = _mlp_head(x, params, "recon") * slot_keep
    return pred, recon, records


def forward(scene: SceneWindow, params: dict[str, Var], cfg: ModelConfig) -> SceneOutput:
    """Run the model on a normalized scene and collect all products."""
    check_scene(scene, T=cfg.T, H=cfg.H)
    if not scene.normalized:
        raise ValueError("forward expects a normalized scene; call normalize() first")
    pred, recon, records = forward_tape(scene.past, scene.valid, params, cfg)
    n = scene.n_slots
    return SceneOutput(
        pred=np.array(pred.value).reshape(n, cfg.H, N_AXES),
        recon=np.array(recon.value).reshape(n, cfg.T, N_AXES),
        attention=records,
    )
