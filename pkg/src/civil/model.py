"""Network family: image encoders, history transformer, action and heads.

Observations at each step are encoded camera-by-camera.  The overhead
encoder's output is split into an explicit slice, trained to reproduce the
marker reading through the marker head, and an implicit remainder; the
agent-centered camera contributes implicit features only, since its view
moves with the agent and carries no stable explicit target.  The agent's own
state enters the policy as a separate token rather than through an encoder,
which lets the same encoders run on stateless play observations.

The policy consumes the last ``history + 1`` steps.  Each step contributes
three tokens (state, overhead features, ego features); tokens are projected
to a shared width, tagged with a sinusoidal encoding of their step slot, and
mixed by a small transformer.  The action head reads the final step's state
token and emits tanh-bounded velocities plus a gripper toggle logit.

Causal encoders mirror the two image encoders exactly.  They are trained in
a second phase to reproduce, from raw images, what the originals compute on
masked images; at deployment they replace the originals, so no mask, marker,
or prompt is ever needed at test time.

All modules are plain float32 and convert cleanly to float64, which the
derivative tests rely on.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

__all__ = [
    "ModelConfig",
    "ModelBundle",
    "ImageEncoder",
    "MarkerHead",
    "SlotTransformer",
    "ActionHead",
    "build_bundle",
    "miniature_config",
    "images_to_tensor",
    "module_fingerprint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shared shape and size knobs for one bundle of networks."""

    marker_dim: int = 2              # width of the explicit feature slice
    implicit_dim: int = 16
    static_res: int = 64
    ego_res: int = 32
    state_dim: int = 3
    action_dim: int = 3
    token_dim: int = 128
    history: int = 4                 # past steps seen in addition to the current
    transformer_layers: int = 2
    attention_heads: int = 4
    feedforward_dim: int = 256
    conv_channels: Tuple[int, ...] = (8, 16, 32, 32)
    head_hidden: int = 64
    marker_head: str = "identity"    # "identity" keeps explicit features in marker units

    def __post_init__(self) -> None:
        if self.marker_dim < 0:
            raise ValueError("marker_dim must be non-negative")
        if self.implicit_dim < 1:
            raise ValueError("implicit_dim must be positive")
        if self.token_dim % self.attention_heads != 0:
            raise ValueError("token_dim must divide evenly among attention heads")
        if self.marker_head not in ("identity", "linear"):
            raise ValueError("marker_head must be 'identity' or 'linear'")
        if self.history < 0:
            raise ValueError("history must be non-negative")

    @property
    def static_dim(self) -> int:
        return self.marker_dim + self.implicit_dim

    @property
    def window(self) -> int:
        return self.history + 1


def miniature_config() -> ModelConfig:
    """A complete bundle small enough to finite-difference (< 500 params)."""
    return ModelConfig(
        marker_dim=2,
        implicit_dim=1,
        static_res=4,
        ego_res=4,
        token_dim=4,
        history=1,
        transformer_layers=1,
        attention_heads=2,
        feedforward_dim=4,
        conv_channels=(1,),
        head_hidden=3,
    )


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [0, 1]."""
    tensor = torch.from_numpy(np.ascontiguousarray(images))
    tensor = tensor.to(dtype) / 255.0
    return tensor.movedim(-1, -3)


class ImageEncoder(nn.Module):
    """Stride-2 conv stack read out through per-channel soft keypoints.

    Each channel of the final feature map acts as a heatmap: a softmax over
    its cells (sharpened by a learnable per-channel temperature) gives the
    expected cell coordinates, and those keypoints plus the channel means
    feed a linear readout.  Two extra input channels carry each pixel's
    center position in table coordinates (x rightward, y upward).  Both
    choices exist for the same reason: a plain conv stack with global
    pooling is translation-invariant and cannot say where anything is,
    while the explicit features must regress positions to centimeter level
    from a few dozen layouts.
    """

    TEMPERATURE_INIT = 10.0

    def __init__(self, out_dim: int, channels: Tuple[int, ...]):
        super().__init__()
        layers: List[nn.Module] = []
        prev = 5  # rgb + (x, y) coordinate channels
        for c in channels:
            layers.append(nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU())
            prev = c
        self.blocks = nn.Sequential(*layers)
        self.log_temperature = nn.Parameter(
            torch.full((prev,), math.log(self.TEMPERATURE_INIT))
        )
        self.readout = nn.Linear(3 * prev, out_dim)

    @staticmethod
    def _with_coords(images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        kw = {"dtype": images.dtype, "device": images.device}
        xs = ((torch.arange(w, **kw) + 0.5) / w).view(1, 1, 1, w).expand(b, 1, h, w)
        ys = (1.0 - (torch.arange(h, **kw) + 0.5) / h).view(1, 1, h, 1).expand(b, 1, h, w)
        return torch.cat([images, xs, ys], dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self._with_coords(images))
        _, _, rows, cols = h.shape
        flat = h.flatten(2)
        weights = torch.softmax(flat * self.log_temperature.exp()[None, :, None], dim=-1)
        kw = {"dtype": h.dtype, "device": h.device}
        xs = ((torch.arange(cols, **kw) + 0.5) / cols).repeat(rows)
        ys = (1.0 - (torch.arange(rows, **kw) + 0.5) / rows).repeat_interleave(cols)
        keypoints = torch.cat(
            [(weights * xs).sum(-1), (weights * ys).sum(-1), flat.mean(-1)], dim=1
        )
        return self.readout(keypoints)


class MarkerHead(nn.Module):
    """Maps the explicit feature slice to marker-reading space.

    The default is the fixed identity, which pins explicit features to the
    markers' own units (table coordinates).  The "linear" variant learns an
    invertible square map instead; invertibility is what keeps the explicit
    slice informationally equivalent to the markers.
    """

    def __init__(self, marker_dim: int, kind: str = "identity"):
        super().__init__()
        self.kind = kind
        self.marker_dim = marker_dim
        if kind == "linear":
            self.linear = nn.Linear(marker_dim, marker_dim, bias=False)
            if marker_dim > 0:
                nn.init.orthogonal_(self.linear.weight)
        elif kind != "identity":
            raise ValueError(f"unknown marker head kind {kind!r}")

    def forward(self, explicit: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return explicit
        return self.linear(explicit)

    def check_invertible(self, min_abs_det: float = 1e-6) -> None:
        if self.kind == "identity" or self.marker_dim == 0:
            return
        det = torch.det(self.linear.weight.detach().double())
        if torch.abs(det) < min_abs_det:
            raise ValueError(f"marker head became non-invertible (|det|={float(det):.2e})")


def _sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float32)[:, None]
    half = torch.arange(0, dim, 2, dtype=torch.float32)
    angles = position / torch.pow(torch.tensor(10000.0), half / dim)
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


class SlotTransformer(nn.Module):
    """Mixes a short window of (state, overhead, ego) token triples.

    Every token is tagged with the sinusoidal encoding of its step slot, so
    the three tokens of one step share a tag and steps are ordered.  The
    summary read by the action head is the transformed state token of the
    newest step.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.token_dim
        self.state_proj = nn.Linear(config.state_dim, d)
        self.static_proj = nn.Linear(config.static_dim, d)
        self.ego_proj = nn.Linear(config.implicit_dim, d)
        self.register_buffer("slot_tags", _sinusoidal_table(config.window, d))
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.attention_heads,
            dim_feedforward=config.feedforward_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=config.transformer_layers, enable_nested_tensor=False
        )

    def forward(
        self,
        states: torch.Tensor,        # (B, window, state_dim)
        static_features: torch.Tensor,  # (B, window, marker_dim + implicit_dim)
        ego_features: torch.Tensor,     # (B, window, implicit_dim)
    ) -> torch.Tensor:
        window = self.config.window
        if states.shape[1] != window:
            raise ValueError(f"expected a window of {window} steps, got {states.shape[1]}")
        tags = self.slot_tags.to(states.dtype)
        tokens = torch.stack(
            [
                self.state_proj(states) + tags,
                self.static_proj(static_features) + tags,
                self.ego_proj(ego_features) + tags,
            ],
            dim=2,
        )  # (B, window, 3, d)
        tokens = tokens.flatten(1, 2)  # slot-major: s_0, o_0, e_0, s_1, ...
        mixed = self.encoder(tokens)
        return mixed[:, 3 * self.config.history]


class ActionHead(nn.Module):
    """Two hidden layers; outputs raw (vx, vy, gripper logit)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.token_dim, config.head_hidden),
            nn.ReLU(),
            nn.Linear(config.head_hidden, config.head_hidden),
            nn.ReLU(),
            nn.Linear(config.head_hidden, config.action_dim),
        )

    def forward(self, summary: torch.Tensor) -> torch.Tensor:
        return self.net(summary)

    @staticmethod
    def decode(raw: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(velocity in (-1, 1)^2, gripper logit)."""
        return torch.tanh(raw[..., :2]), raw[..., 2]


class ModelBundle:
    """All networks of one trained agent, plus bookkeeping.

    ``causal_trained`` records whether the causal encoders have been through
    their training phase; rollout code uses it to decide which encoders may
    run on raw test images.
    """

    MODULE_NAMES = (
        "static_encoder",
        "ego_encoder",
        "marker_head",
        "policy",
        "action_head",
        "causal_static",
        "causal_ego",
    )

    def __init__(self, config: ModelConfig):
        self.config = config
        self.static_encoder = ImageEncoder(config.static_dim, config.conv_channels)
        self.ego_encoder = ImageEncoder(config.implicit_dim, config.conv_channels)
        self.marker_head = MarkerHead(config.marker_dim, config.marker_head)
        self.policy = SlotTransformer(config)
        self.action_head = ActionHead(config)
        self.causal_static = ImageEncoder(config.static_dim, config.conv_channels)
        self.causal_ego = ImageEncoder(config.implicit_dim, config.conv_channels)
        self.causal_trained = False

    # -- module plumbing ---------------------------------------------------

    def modules(self) -> Dict[str, nn.Module]:
        return {name: getattr(self, name) for name in self.MODULE_NAMES}

    def phase1_modules(self) -> Dict[str, nn.Module]:
        return {
            name: getattr(self, name)
            for name in ("static_encoder", "ego_encoder", "marker_head", "policy", "action_head")
        }

    def causal_modules(self) -> Dict[str, nn.Module]:
        return {"causal_static": self.causal_static, "causal_ego": self.causal_ego}

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for module in self.modules().values():
            module.to(dtype)
        return self

    def train(self) -> None:
        for module in self.modules().values():
            module.train()

    def eval(self) -> None:
        for module in self.modules().values():
            module.eval()

    def freeze_phase1(self) -> None:
        for module in self.phase1_modules().values():
            for parameter in module.parameters():
                parameter.requires_grad_(False)

    def init_causal_from_encoders(self) -> None:
        self.causal_static.load_state_dict(self.static_encoder.state_dict())
        self.causal_ego.load_state_dict(self.ego_encoder.state_dict())

    def explicit_slice(self, static_features: torch.Tensor) -> torch.Tensor:
        return static_features[..., : self.config.marker_dim]

    def parameter_count(self) -> int:
        return sum(p.numel() for m in self.modules().values() for p in m.parameters())


def build_bundle(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Construct a bundle with reproducible initial weights."""
    torch.manual_seed(seed)
    return ModelBundle(config)


def module_fingerprint(module: nn.Module) -> str:
    """sha256 over all parameters and buffers; equal iff weights are equal."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state.keys()):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(bundle: ModelBundle, path, extra: Optional[dict] = None) -> None:
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(bundle.config),
        "causal_trained": bundle.causal_trained,
        "modules": {name: mod.state_dict() for name, mod in bundle.modules().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> Tuple[ModelBundle, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version!r} != supported {CHECKPOINT_VERSION}")
    raw_config = dict(payload["config"])
    raw_config["conv_channels"] = tuple(raw_config["conv_channels"])
    config = ModelConfig(**raw_config)
    bundle = ModelBundle(config)
    for name, state in payload["modules"].items():
        getattr(bundle, name).load_state_dict(state)
    bundle.causal_trained = bool(payload.get("causal_trained", False))
    return bundle, payload.get("extra", {})
