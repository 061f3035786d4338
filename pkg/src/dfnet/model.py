"""Full network: encoder → DFM → attention (+CRF) → fusion head; checkpoints."""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfnet import kv
from dfnet import tensor as T
from dfnet.atm import AttentionParams, attention_logits, reconstruct_features
from dfnet.crf import CRF, CrfParams, build_guidance, pairwise_kernel
from dfnet.dfm import DFM, DFeatureSet
from dfnet.encoder import Encoder, EncoderConfig
from dfnet.errors import ConfigError, MalformedFileError
from dfnet.head import RELU_THEN_BN, HeadParams, predict_logits, self_weight_fuse
from dfnet.nn import Conv2d, Module
from dfnet.tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    K: int = 8
    momentum: float = 0.5
    crf: CrfParams = field(default_factory=CrfParams)
    use_crf: bool = True
    learn_compat: bool = False
    head_order: str = RELU_THEN_BN
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")


@dataclass
class GroupOutput:
    logits: Tensor  # N×h×w, pre-sigmoid
    dfeat: DFeatureSet | None = None


class DFNet(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.encoder.out_channels
        self.encoder = Encoder(cfg.encoder, rng)
        # throwaway prediction layer for static pretraining only
        self.adapter = Conv2d(c, 1, 1, rng=rng)
        self.dfm = DFM(c, cfg.K, cfg.momentum, rng)
        self.atm = AttentionParams(c, rng)
        self.crf = CRF(cfg.K, cfg.crf, cfg.learn_compat)
        self.head = HeadParams(c, rng, cfg.head_order)

    def forward_static(self, images) -> GroupOutput:
        """Predict from encoder features alone through the 1×1 adapter."""
        feats = self.encoder(T.as_tensor(images))
        logits = self.adapter(feats)
        return GroupOutput(T.reshape(logits, logits.shape[:-1]))

    def forward_features(self, feats: Tensor, images, use_crf: bool | None = None) -> GroupOutput:
        """Run DFM, attention, CRF and the head on precomputed N×h×w×c features."""
        dfeat = self.dfm(feats)
        return GroupOutput(self.decode(feats, images, dfeat, use_crf), dfeat)

    def decode(self, feats: Tensor, images, dfeat: DFeatureSet, use_crf: bool | None = None) -> Tensor:
        """Attention, optional CRF and head for N×h×w×c features against given D-features."""
        use_crf = self.cfg.use_crf if use_crf is None else use_crf
        n, h, w, _ = feats.shape
        att = attention_logits(feats, dfeat, self.atm)
        if use_crf and self.crf.params.n_iters > 0:
            imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
            kernels = np.stack(
                [pairwise_kernel(build_guidance(img, h, w), self.crf.params) for img in imgs]
            )
            q = self.crf(att, kernels)
        else:
            q = T.softmax(att.logits, axis=-1)
        f_new = reconstruct_features(q, dfeat, h, w).tensor
        fused = self_weight_fuse(f_new, feats, self.head)
        return predict_logits(fused, self.head)

    def forward_group(self, images, use_crf: bool | None = None) -> GroupOutput:
        """Joint forward of one frame group (N×H×W×3) through the full model."""
        images = T.as_tensor(images)
        feats = self.encoder(images)
        return self.forward_features(feats, images, use_crf)

    def forward(self, images, use_crf: bool | None = None) -> GroupOutput:
        return self.forward_group(images, use_crf)


def upsample_logits(logits: Tensor, H: int, W: int) -> Tensor:
    """Bilinearly resize N×h×w logits to N×H×W."""
    x = T.reshape(logits, logits.shape + (1,))
    x = T.bilinear_resize(x, H, W)
    return T.reshape(x, x.shape[:-1])


def heatmap(logits: Tensor, H: int, W: int) -> Tensor:
    """Foreground probabilities at input resolution."""
    return T.sigmoid(upsample_logits(logits, H, W))


# ---------------------------------------------------------------------------
# checkpoints: a zip of manifest.txt plus one DFT1 blob per tensor

_CKPT_FORMAT = "dfnet-checkpoint"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_bytes(model: DFNet, extra: dict[str, str] | None = None) -> bytes:
    state = model.state_dict()
    manifest = [f"# {_CKPT_FORMAT}", f"version = {kv.FORMAT_VERSION}", f"format = {_CKPT_FORMAT}"]
    manifest += [f"model.{k} = {v}" for k, v in kv.flatten(model.cfg).items()]
    manifest.append(f"dfm.momentum = {model.dfm.bank.momentum!r}")
    manifest.append(f"dfm.train_mode = {'true' if model.dfm.bank.train_mode else 'false'}")
    for k, v in (extra or {}).items():
        manifest.append(f"extra.{k} = {v}")
    for name in sorted(state):
        manifest.append(f"tensor.{name} = {'x'.join(map(str, state[name].shape))}")
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.txt", ("\n".join(manifest) + "\n").encode())
        for name in sorted(state):
            _zip_write(zf, f"tensors/{name}.dft", T.dft_bytes(state[name]))
    return buf.getvalue()


def save_checkpoint(path, model: DFNet, extra: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path) -> tuple[DFNet, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns it with the ``extra.*`` manifest entries."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise MalformedFileError(f"not a checkpoint archive: {exc}", 0) from None
    with zf:
        entries = kv.parse_lines(zf.read("manifest.txt").decode())
        if entries.get("format") != _CKPT_FORMAT:
            raise ConfigError("manifest does not describe a dfnet checkpoint")
        model_entries = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
        cfg = kv.build(ModelConfig, model_entries)
        model = DFNet(cfg)
        state = {}
        for key in entries:
            if key.startswith("tensor."):
                name = key[len("tensor."):]
                state[name] = T.parse_dft(zf.read(f"tensors/{name}.dft"))
    model.load_state_dict(state)
    model.train(entries.get("dfm.train_mode", "true") == "true")
    extra = {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}
    return model, extra
