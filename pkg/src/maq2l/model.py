"""The full classifier: backbone -> {encoder, CAM mask} -> masked decoder
-> per-label logits, plus the auxiliary CAM classification output."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import Decoder, Encoder, LogitProbe
from .backbone import Backbone, CamHead
from .errors import ConfigError
from .metrics import ClassTable


@dataclass
class ModelConfig:
    n_classes: int
    input_size: int = 32
    channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 2)
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 2
    ffn_mult: int = 2
    dropout: float = 0.1
    aux_weight: float = 0.5
    mask_detach: bool = False
    label_pos: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if self.n_classes < 1:
            raise ConfigError("model needs at least one class")
        total = int(np.prod(self.strides))
        if self.input_size % total:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by total stride {total}")
        side = self.input_size // total
        if side * side < 4:
            raise ConfigError("backbone output needs at least 4 spatial tokens")

    def to_flat(self) -> dict:
        return {
            "model.n_classes": str(self.n_classes),
            "model.input_size": str(self.input_size),
            "model.channels": ",".join(map(str, self.channels)),
            "model.strides": ",".join(map(str, self.strides)),
            "model.d_model": str(self.d_model),
            "model.heads": str(self.heads),
            "model.encoder_layers": str(self.encoder_layers),
            "model.decoder_layers": str(self.decoder_layers),
            "model.ffn_mult": str(self.ffn_mult),
            "model.dropout": repr(self.dropout),
            "model.aux_weight": repr(self.aux_weight),
            "model.mask_detach": "1" if self.mask_detach else "0",
            "model.label_pos": "1" if self.label_pos else "0",
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelConfig":
        def ints(key):
            return tuple(int(v) for v in flat[key].split(","))

        return cls(
            n_classes=int(flat["model.n_classes"]),
            input_size=int(flat["model.input_size"]),
            channels=ints("model.channels"),
            strides=ints("model.strides"),
            d_model=int(flat["model.d_model"]),
            heads=int(flat["model.heads"]),
            encoder_layers=int(flat["model.encoder_layers"]),
            decoder_layers=int(flat["model.decoder_layers"]),
            ffn_mult=int(flat["model.ffn_mult"]),
            dropout=float(flat["model.dropout"]),
            aux_weight=float(flat["model.aux_weight"]),
            mask_detach=flat["model.mask_detach"] == "1",
            label_pos=flat["model.label_pos"] == "1",
        )


class DefectClassifier:
    """End-to-end multi-label model over one image.

    Weights are created from the given seed; forward passes are
    deterministic in eval mode. One instance plus its tape belongs to a
    single thread of execution.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.channels, cfg.strides, rng=rng)
        c = self.backbone.out_channels
        self.cam_head = CamHead(c, cfg.n_classes, rng=rng)
        self.encoder = Encoder(c, cfg.d_model, cfg.heads, cfg.encoder_layers,
                               cfg.ffn_mult, cfg.dropout, rng)
        self.decoder = Decoder(cfg.n_classes, cfg.d_model, cfg.heads,
                               cfg.decoder_layers, cfg.ffn_mult, cfg.dropout,
                               rng, label_pos=cfg.label_pos)
        self.logit_probe = LogitProbe(cfg.n_classes, cfg.d_model, rng)

    # -- forward ---------------------------------------------------------

    def forward(self, image: T.Tensor, rng=None, train: bool = False):
        """image (3, h, w) -> (logits (N,), cam_logits (N,))."""
        feats = self.backbone.extract_features(image)
        _, h, w = feats.shape
        cam_logits = self.cam_head.cam_logits(feats)
        mask_src = feats.detach() if self.cfg.mask_detach else feats
        mask = self.cam_head.attention_mask(mask_src)
        f_enc = self.encoder(feats, rng=rng, train=train)
        queries = self.decoder(f_enc, attn_mask=mask, grid_hw=(h, w),
                               rng=rng, train=train)
        return self.logit_probe(queries), cam_logits

    def forward_batch(self, images, rng=None, train=False):
        """List of (3,h,w) tensors -> (logits (B,N), cam_logits (B,N))."""
        outs = [self.forward(img, rng=rng, train=train) for img in images]
        return (T.stack_rows([o[0] for o in outs]),
                T.stack_rows([o[1] for o in outs]))

    def predict_probs(self, image: T.Tensor) -> np.ndarray:
        logits, _ = self.forward(image, train=False)
        return T.sigmoid(logits).data

    # -- parameters and state ---------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for section, mod in (("backbone", self.backbone),
                             ("cam_head", self.cam_head),
                             ("encoder", self.encoder)):
            for k, v in mod.parameters().items():
                out[f"{section}.{k}"] = v
        for k, v in self.decoder.parameters().items():
            # label embedding is its own checkpoint section
            if k.startswith("label_embedding."):
                out[k] = v
            else:
                out[f"decoder.{k}"] = v
        for k, v in self.logit_probe.parameters().items():
            out[f"logit_probe.{k}"] = v
        return out

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state missing parameters: {sorted(missing)[:4]}...")
        for k, v in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ConfigError(f"parameter {k}: shape {arr.shape} != {v.data.shape}")
            v.data = arr.copy()

    def zero_grads(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def clone_for_eval(self, state: dict | None = None) -> "DefectClassifier":
        """Fresh instance with copied weights; evaluation never touches the
        live parameters."""
        twin = DefectClassifier(replace(self.cfg), seed=0)
        twin.load_state_arrays(state if state is not None else self.state_arrays())
        return twin
