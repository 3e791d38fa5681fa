"""Desk-scale convolutional backbone with two attention insertion points.

Each stage is ``downsample -> 3x3 conv -> ReLU``.  MAM1 sits behind stage
``tap1`` (coarse grid) and its fused output feeds the remaining stages; MAM2
sits behind the final stage.  The video embedding is the temporal and spatial
mean of the final (fused) features and an unbiased linear classifier produces
identity logits.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .attention import MAMParams, init_mam_params, mam_forward, video_embedding
from .errors import ConfigurationError, DimensionError
from .numerics import conv3x3, downsample, read_tensor, relu, write_tensor


class Wiring(str, Enum):
    BASELINE = "baseline"
    SINGLE_MAM = "single-mam"
    SINGLE_MAM_CON = "single-mam-con"
    MULTI_MAM = "multi-mam"
    MULTI_MAM_CON = "multi-mam-con"

    @property
    def uses_mam1(self) -> bool:
        return self in (Wiring.MULTI_MAM, Wiring.MULTI_MAM_CON)

    @property
    def uses_mam2(self) -> bool:
        return self is not Wiring.BASELINE

    @property
    def uses_con(self) -> bool:
        return self in (Wiring.SINGLE_MAM_CON, Wiring.MULTI_MAM_CON)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    factors: tuple[int, ...] = (2, 2, 2)
    tap1: int | None = 1
    input_size: tuple[int, int] = (64, 32)
    in_channels: int = 3
    K: int = 4
    d1: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.widths or len(self.widths) != len(self.factors):
            out.append("widths and factors must be non-empty and equally long")
            return out
        if self.K < 1:
            out.append(f"K={self.K} must be >= 1")
        if self.tap1 is not None and not 0 <= self.tap1 < len(self.widths) - 1:
            out.append(f"tap1={self.tap1} must precede the final stage {len(self.widths) - 1}")
        h, w = self.input_size
        for i, f in enumerate(self.factors):
            if f < 1 or h % f or w % f:
                out.append(f"stage {i}: {h}x{w} not divisible by factor {f}")
                return out
            h, w = h // f, w // f
            if i in (self.tap1, len(self.widths) - 1):
                if h % self.K:
                    out.append(f"stage {i}: height {h} not divisible by K={self.K}")
                if self.d1 >= self.widths[i]:
                    out.append(f"stage {i}: d1={self.d1} must be below width {self.widths[i]}")
        if self.d1 < 1:
            out.append(f"d1={self.d1} must be >= 1")
        return out

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """``(channels, H, W)`` after every stage."""
        h, w = self.input_size
        out = []
        for c, f in zip(self.widths, self.factors):
            h, w = h // f, w // f
            out.append((c, h, w))
        return out

    @property
    def final_stage(self) -> int:
        return len(self.widths) - 1

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class ModelState:
    config: BackboneConfig
    wiring: Wiring
    num_classes: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def mam(self, name: str) -> MAMParams:
        prefix = name + "."
        return MAMParams.from_dict({k[len(prefix):]: v for k, v in self.params.items()
                                    if k.startswith(prefix)})

    @property
    def embedding_dim(self) -> int:
        return self.config.widths[-1]

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.wiring, self.num_classes,
                          {k: v.copy() for k, v in self.params.items()})


# independent random streams per component keep ablations paired under one seed
_STREAM = {"backbone": 0, "mam1": 1, "mam2": 2, "classifier": 3}


def init_model(config: BackboneConfig, wiring: Wiring | str, num_classes: int, seed: int,
               dtype=np.float64) -> ModelState:
    wiring = Wiring(wiring)
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 identity classes, got {num_classes}")
    params = {}
    rng = np.random.default_rng([seed, _STREAM["backbone"]])
    cin = config.in_channels
    for i, c in enumerate(config.widths):
        std = np.sqrt(2.0 / (cin * 9))
        params[f"stage{i}.weight"] = (rng.standard_normal((c, cin, 3, 3)) * std).astype(dtype)
        params[f"stage{i}.bias"] = np.zeros(c, dtype)
        cin = c
    shapes = config.stage_shapes()
    mams = []
    if wiring.uses_mam1 and config.tap1 is not None:
        mams.append(("mam1", shapes[config.tap1][0]))
    if wiring.uses_mam2:
        mams.append(("mam2", shapes[-1][0]))
    for name, d in mams:
        mrng = np.random.default_rng([seed, _STREAM[name]])
        for key, v in init_mam_params(config.K, d, config.d1, mrng, dtype).items():
            params[f"{name}.{key}"] = v
    crng = np.random.default_rng([seed, _STREAM["classifier"]])
    d = config.widths[-1]
    params["classifier.weight"] = (crng.uniform(-1, 1, (num_classes, d)) / np.sqrt(d)).astype(dtype)
    return ModelState(config, wiring, num_classes, params)


def _check_frames(frames: np.ndarray, config: BackboneConfig) -> None:
    want = (config.in_channels, *config.input_size)
    if frames.ndim != 4 or frames.shape[1:] != want:
        raise DimensionError(f"frames must be (N, {want[0]}, {want[1]}, {want[2]}), got {frames.shape}")


def _stage(x, params, i, factor):
    pool = downsample(x, factor)
    conv = conv3x3(pool.output, params[f"stage{i}.weight"], params[f"stage{i}.bias"])
    act = relu(conv.output)

    def backward(g):
        (g,) = act.backward(g)
        gx, gw, gb = conv.backward(g)
        (gx,) = pool.backward(gx)
        return gx, {f"stage{i}.weight": gw, f"stage{i}.bias": gb}

    return act.output, backward


def backbone_forward(frames: np.ndarray, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Plain backbone activations at tap1 and at the final stage (no attention)."""
    cfg = state.config
    _check_frames(frames, cfg)
    x, tap1 = frames, None
    for i, f in enumerate(cfg.factors):
        x, _ = _stage(x, state.params, i, f)
        if i == cfg.tap1:
            tap1 = x
    return tap1, x


@dataclass
class ForwardResult:
    embedding: np.ndarray          # (B, D)
    logits: np.ndarray             # (B, C)
    attention: dict                # name -> (B, N, K, H, W)
    backward: object = None


def model_forward(frames: np.ndarray, state: ModelState) -> ForwardResult:
    """Run clips ``(B, N, 3, H_in, W_in)`` through backbone, MAMs, pooling and classifier.

    ``result.backward(g_embedding, g_logits, g_attention)`` returns a dict of
    parameter gradients; any cotangent may be ``None``.
    """
    cfg = state.config
    if frames.ndim != 5:
        raise DimensionError(f"expected clips (B, N, C, H, W), got shape {frames.shape}")
    b, n = frames.shape[:2]
    x = frames.reshape(b * n, *frames.shape[2:])
    _check_frames(x, cfg)

    tape = []  # (kind, name, backward)
    attention = {}
    mam_at = {}
    if state.wiring.uses_mam1 and cfg.tap1 is not None:
        mam_at[cfg.tap1] = "mam1"
    if state.wiring.uses_mam2:
        mam_at[cfg.final_stage] = "mam2"

    for i, f in enumerate(cfg.factors):
        x, back = _stage(x, state.params, i, f)
        tape.append(("stage", None, back))
        if i in mam_at:
            name = mam_at[i]
            rec = mam_forward(x, state.mam(name))
            x, a = rec.output
            attention[name] = a.reshape(b, n, *a.shape[1:])
            tape.append(("mam", name, rec.backward))

    feats = x.reshape(b, n, *x.shape[1:])
    emb = video_embedding(feats)
    W = state.params["classifier.weight"]
    logits = emb.output @ W.T

    def backward(g_embedding=None, g_logits=None, g_attention=None):
        grads = {}
        g_attention = g_attention or {}
        g_emb = np.zeros_like(emb.output) if g_embedding is None else g_embedding.copy()
        if g_logits is not None:
            g_emb += g_logits @ W
            grads["classifier.weight"] = g_logits.T @ emb.output
        else:
            grads["classifier.weight"] = np.zeros_like(W)
        (g,) = emb.backward(g_emb)
        g = g.reshape(b * n, *g.shape[2:])
        for kind, name, back in reversed(tape):
            if kind == "stage":
                g, pg = back(g)
                grads.update(pg)
            else:
                ga = g_attention.get(name)
                if ga is not None:
                    ga = ga.reshape(b * n, *ga.shape[2:])
                g, mg = back(g, ga)
                for key, v in mg.items():
                    grads[f"{name}.{key}"] = v
        return grads

    return ForwardResult(emb.output, logits, attention, backward)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, state: ModelState) -> None:
    """Tensor sections (``u32`` name length, UTF-8 name, tensor record) plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        for name in sorted(state.params):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, state.params[name])
    meta = {"backbone": state.config.to_json(), "wiring": state.wiring.value,
            "num_classes": state.num_classes}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    params = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            (length,) = struct.unpack("<I", head)
            name = fh.read(length).decode("utf-8")
            params[name] = read_tensor(fh)
    return ModelState(BackboneConfig.from_json(meta["backbone"]), Wiring(meta["wiring"]),
                      meta["num_classes"], params)
