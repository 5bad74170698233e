"""Encoder / decoder / embedding / LSTM network for simultaneous segmentation and recognition.

The network factors gesture recognition ``f(I) = l`` into three parts:

* ``encoder_forward`` (a): RGB frame -> hidden feature map,
* ``decoder_forward`` (b): hidden map -> 2-channel hand/context mask logits,
* ``embed`` + ``classify_sequence`` (c): hidden map -> per-frame embedding ->
  LSTM -> gesture logits.

At inference only a and c run; ``recognize`` never touches decoder weights.

Shape rules (paper preset, input 126 x 224)::

    stem conv 7/2/3      126x224 -> 63x112
    max-pool 3/2/1       63x112  -> 32x56
    residual stage 1     32x56   (64 ch)
    residual stage 2     32x56   -> 16x28 (128 ch)
    conv 3/2/1           16x28   -> 8x14
    conv 3/2/1           8x14    -> 4x7   (256 ch, flatten 7168)
    4 x deconv 4/2/1     4x7     -> 64x112
    deconv 4/2/(2,1)     64x112  -> 126x224

The final deconv padding is derived from the input size, which gives (2, 1)
for 126 x 224. Flattening of the hidden map is row-major over (C, H, W).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autograd import Tensor, no_grad, reshape
from .errors import ConfigError, ShapeError
from .nn import functional as F
from .nn.init import init_kaiming, init_orthogonal, init_xavier_normal, init_zeros

PARAM_GROUPS = ("encoder", "decoder", "embed", "lstm")


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 126
    input_w: int = 224
    num_classes: int = 83
    embedding_dim: int = 83
    lstm_hidden: int = 83
    lstm_layers: int = 4
    encoder_widths: tuple[int, ...] = (64, 64, 128, 128, 256)
    decoder_widths: tuple[int, ...] = (64, 32, 16, 8, 2)
    fc_hidden: int = 2048
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    preset: str = "paper"

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "paper":
            base = cls()
        elif name == "tiny":
            base = cls(
                input_h=64,
                input_w=112,
                num_classes=5,
                embedding_dim=20,
                lstm_hidden=20,
                encoder_widths=(16, 16, 32, 32, 64),
                decoder_widths=(32, 16, 8, 4, 2),
                fc_hidden=512,
                preset="tiny",
            )
        else:
            raise ConfigError(f"unknown preset {name!r} (expected 'paper' or 'tiny')")
        return replace(base, **overrides) if overrides else base

    def fingerprint(self) -> np.ndarray:
        """Numeric summary of every architecture-relevant field, stored in checkpoints."""
        values = [
            self.input_h,
            self.input_w,
            self.num_classes,
            self.embedding_dim,
            self.lstm_hidden,
            self.lstm_layers,
            self.fc_hidden,
            *self.encoder_widths,
            *self.decoder_widths,
            *self.norm_mean,
            *self.norm_std,
        ]
        return np.asarray(values, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ShapePlan:
    """Per-layer output sizes (C, H, W) derived from a config."""

    layers: list[tuple[str, tuple[int, int, int]]] = field(default_factory=list)
    final_padding: tuple[int, int] = (0, 0)

    @property
    def hidden(self) -> tuple[int, int, int]:
        return dict(self.layers)["encoder.conv4"]

    @property
    def flatten_size(self) -> int:
        c, h, w = self.hidden
        return c * h * w


def plan_shapes(cfg: ModelConfig) -> ShapePlan:
    """Validate a config by walking the layer shape arithmetic.

    Raises ``ConfigError`` naming the first layer whose shapes fail: every
    stride-2 stage must receive at least 2 x 2 input, and the last deconv must
    reach exactly ``input_h x input_w`` with a non-negative integer padding.
    """
    if len(cfg.encoder_widths) != 5 or len(cfg.decoder_widths) != 5:
        raise ConfigError("encoder_widths and decoder_widths need 5 entries each")
    if cfg.decoder_widths[-1] != 2:
        raise ConfigError("the last decoder width must be 2 (context, hand)")
    if cfg.embedding_dim < cfg.num_classes:
        raise ConfigError("embedding_dim must be >= num_classes (the embedding doubles as frame logits)")
    if min(cfg.num_classes, cfg.lstm_hidden, cfg.lstm_layers, cfg.fc_hidden) < 1:
        raise ConfigError("num_classes, lstm_hidden, lstm_layers and fc_hidden must be positive")
    plan = ShapePlan()
    h, w = cfg.input_h, cfg.input_w
    if h < 1 or w < 1:
        raise ConfigError(f"input size {h}x{w} is not positive")
    ew = cfg.encoder_widths
    steps = [
        ("encoder.conv1", ew[0], 7, 3),
        ("encoder.maxpool", ew[0], 3, 1),
        ("encoder.layer1", ew[1], None, None),
        ("encoder.layer2", ew[2], 3, 1),
        ("encoder.conv3", ew[3], 3, 1),
        ("encoder.conv4", ew[4], 3, 1),
    ]
    for path, ch, k, p in steps:
        if k is not None:
            if h < 2 or w < 2:
                raise ConfigError(f"{path}: input {h}x{w} too small for a stride-2 reduction")
            h, w = F.conv_output_size(h, k, 2, p), F.conv_output_size(w, k, 2, p)
        plan.layers.append((path, (ch, h, w)))
    for i, ch in enumerate(cfg.decoder_widths[:-1], start=1):
        h, w = F.deconv_output_size(h, 4, 2, 1), F.deconv_output_size(w, 4, 2, 1)
        plan.layers.append((f"decoder.deconv{i}", (ch, h, w)))
    pads = []
    for size, target in ((h, cfg.input_h), (w, cfg.input_w)):
        twice = (size - 1) * 2 + 4 - target
        if twice < 0 or twice % 2:
            raise ConfigError(f"decoder.deconv5: cannot map {h}x{w} back to {cfg.input_h}x{cfg.input_w}")
        pads.append(twice // 2)
    plan.final_padding = (pads[0], pads[1])
    plan.layers.append(("decoder.deconv5", (2, cfg.input_h, cfg.input_w)))
    return plan


class SsarModel:
    """Parameter container plus train/eval mode for the full network."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.plan = plan_shapes(config)
        self.params = params
        self.buffers = buffers
        self.training = True

    def train(self) -> "SsarModel":
        self.training = True
        return self

    def eval(self) -> "SsarModel":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def group(self, name: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}

    def grads(self, groups: Sequence[str] = PARAM_GROUPS) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items() if k.split(".", 1)[0] in groups}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by path, in a stable order."""
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return dict(sorted(out.items()))

    # convenience wrappers around the module-level functions
    def encode(self, images: Tensor) -> Tensor:
        return encoder_forward(self, images)

    def decode(self, hidden: Tensor) -> Tensor:
        return decoder_forward(self, hidden)


# -- construction ---------------------------------------------------------------


def build_model(config: ModelConfig, seed: int = 0) -> SsarModel:
    """Instantiate every parameter for ``config`` with a seeded RNG.

    Convolutions use He-normal init, linear layers Xavier-normal, LSTM input
    weights Xavier-normal and recurrent weights orthogonal per gate block;
    biases start at zero and batch-norm scales at one.
    """
    plan = plan_shapes(config)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def conv(path, cin, cout, k):
        params[path + ".weight"] = init_kaiming((cout, cin, k, k), rng)

    def deconv(path, cin, cout, k=4, stride=2):
        # each output pixel receives cin * (k / stride)^2 contributions
        params[path + ".weight"] = init_kaiming((cin, cout, k, k), rng, fan_in=cin * (k // stride) ** 2)
        params[path + ".bias"] = init_zeros((cout,))

    def bn(path, ch):
        params[path + ".weight"] = Tensor(np.ones(ch, dtype=np.float32), requires_grad=True)
        params[path + ".bias"] = init_zeros((ch,))
        buffers[path + ".running_mean"] = np.zeros(ch, dtype=np.float32)
        buffers[path + ".running_var"] = np.ones(ch, dtype=np.float32)

    ew = config.encoder_widths
    conv("encoder.conv1", 3, ew[0], 7)
    bn("encoder.bn1", ew[0])
    for stage, cin, cout in (("layer1", ew[0], ew[1]), ("layer2", ew[1], ew[2])):
        for block in range(2):
            prefix = f"encoder.{stage}.{block}"
            bin_ = cin if block == 0 else cout
            conv(prefix + ".conv1", bin_, cout, 3)
            bn(prefix + ".bn1", cout)
            conv(prefix + ".conv2", cout, cout, 3)
            bn(prefix + ".bn2", cout)
            if block == 0 and (stage == "layer2" or cin != cout):
                conv(prefix + ".downsample.conv", cin, cout, 1)
                bn(prefix + ".downsample.bn", cout)
    conv("encoder.conv3", ew[2], ew[3], 3)
    bn("encoder.bn3", ew[3])
    conv("encoder.conv4", ew[3], ew[4], 3)
    bn("encoder.bn4", ew[4])

    cin = ew[4]
    for i, cout in enumerate(config.decoder_widths, start=1):
        deconv(f"decoder.deconv{i}", cin, cout)
        cin = cout

    params["embed.fc1.weight"] = init_xavier_normal((config.fc_hidden, plan.flatten_size), rng)
    bn("embed.bn", config.fc_hidden)
    params["embed.fc2.weight"] = init_xavier_normal((config.embedding_dim, config.fc_hidden), rng)
    params["embed.fc2.bias"] = init_zeros((config.embedding_dim,))

    init_lstm(params, config, rng)
    return SsarModel(config, params, buffers)


def init_lstm(params: dict[str, Tensor], config: ModelConfig, rng: np.random.Generator) -> None:
    """(Re)initialize the classifier: Xavier-normal input weights, orthogonal recurrent blocks, zero biases."""
    hs = config.lstm_hidden
    in_size = config.embedding_dim
    for layer in range(config.lstm_layers):
        prefix = f"lstm.l{layer}"
        params[prefix + ".w_ih"] = init_xavier_normal((4 * hs, in_size), rng)
        blocks = [init_orthogonal((hs, hs), rng).data for _ in range(4)]
        params[prefix + ".w_hh"] = Tensor(np.concatenate(blocks, axis=0), requires_grad=True)
        params[prefix + ".b_ih"] = init_zeros((4 * hs,))
        params[prefix + ".b_hh"] = init_zeros((4 * hs,))
        in_size = hs
    params["lstm.fc.weight"] = init_xavier_normal((config.num_classes, hs), rng)
    params["lstm.fc.bias"] = init_zeros((config.num_classes,))


# -- forward pieces -------------------------------------------------------------


def _bn(model: SsarModel, path: str, x: Tensor) -> Tensor:
    return F.batchnorm(
        x,
        model.params[path + ".weight"],
        model.params[path + ".bias"],
        model.buffers[path + ".running_mean"],
        model.buffers[path + ".running_var"],
        training=model.training,
    )


def _conv_bn_relu(model: SsarModel, conv: str, bn: str, x: Tensor, stride: int, padding: int) -> Tensor:
    y = F.conv2d(x, model.params[conv + ".weight"], None, stride=stride, padding=padding)
    return F.relu(_bn(model, bn, y))


def _basic_block(model: SsarModel, prefix: str, x: Tensor, stride: int) -> Tensor:
    out = _conv_bn_relu(model, prefix + ".conv1", prefix + ".bn1", x, stride, 1)
    out = _bn(model, prefix + ".bn2", F.conv2d(out, model.params[prefix + ".conv2.weight"], None, 1, 1))
    shortcut = x
    if prefix + ".downsample.conv.weight" in model.params:
        shortcut = F.conv2d(x, model.params[prefix + ".downsample.conv.weight"], None, stride, 0)
        shortcut = _bn(model, prefix + ".downsample.bn", shortcut)
    return F.relu(out + shortcut)


def normalize_images(frames: np.ndarray, config: ModelConfig) -> np.ndarray:
    """uint8 frames (..., H, W, 3) -> float32 (..., 3, H, W) with per-channel mean/std."""
    x = np.asarray(frames, dtype=np.float32) / 255.0
    x = (x - np.asarray(config.norm_mean, np.float32)) / np.asarray(config.norm_std, np.float32)
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def encoder_forward(model: SsarModel, images: Tensor) -> Tensor:
    """Normalized images (B, 3, H, W) -> hidden feature map (B, C, h, w)."""
    cfg = model.config
    if images.ndim != 4 or images.shape[1:] != (3, cfg.input_h, cfg.input_w):
        raise ShapeError(f"encoder expects (B, 3, {cfg.input_h}, {cfg.input_w}), got {images.shape}")
    x = _conv_bn_relu(model, "encoder.conv1", "encoder.bn1", images, 2, 3)
    x = F.maxpool2d(x, 3, 2, 1)
    x = _basic_block(model, "encoder.layer1.0", x, 1)
    x = _basic_block(model, "encoder.layer1.1", x, 1)
    x = _basic_block(model, "encoder.layer2.0", x, 2)
    x = _basic_block(model, "encoder.layer2.1", x, 1)
    x = _conv_bn_relu(model, "encoder.conv3", "encoder.bn3", x, 2, 1)
    return _conv_bn_relu(model, "encoder.conv4", "encoder.bn4", x, 2, 1)


def decoder_forward(model: SsarModel, hidden: Tensor) -> Tensor:
    """Hidden map -> mask logits (B, 2, H, W); channel 0 context, channel 1 hand."""
    if hidden.ndim != 4 or hidden.shape[1:] != model.plan.hidden:
        raise ShapeError(f"decoder expects (B, {model.plan.hidden}), got {hidden.shape}")
    x = hidden
    for i in range(1, 6):
        path = f"decoder.deconv{i}"
        padding = 1 if i < 5 else model.plan.final_padding
        x = F.deconv2d(x, model.params[path + ".weight"], model.params[path + ".bias"], 2, padding)
        if i < 5:
            x = F.relu(x)
    return x


def embed(model: SsarModel, hidden: Tensor) -> Tensor:
    """Hidden map -> per-frame embedding (B, embedding_dim)."""
    if hidden.ndim != 4 or hidden.shape[1:] != model.plan.hidden:
        raise ShapeError(f"embed expects (B, {model.plan.hidden}), got {hidden.shape}")
    flat = reshape(hidden, (hidden.shape[0], model.plan.flatten_size))
    x = F.linear(flat, model.params["embed.fc1.weight"])
    x = F.relu(_bn(model, "embed.bn", x))
    return F.linear(x, model.params["embed.fc2.weight"], model.params["embed.fc2.bias"])


def frame_logits(model: SsarModel, embeddings: Tensor) -> Tensor:
    """Leading ``num_classes`` embedding components, used as per-frame class logits."""
    k = model.config.num_classes
    if embeddings.shape[1] == k:
        return embeddings
    return embeddings[:, :k]


def lstm_layers(model: SsarModel) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
    p = model.params
    return [
        (p[f"lstm.l{i}.w_ih"], p[f"lstm.l{i}.w_hh"], p[f"lstm.l{i}.b_ih"], p[f"lstm.l{i}.b_hh"])
        for i in range(model.config.lstm_layers)
    ]


def classify_sequence(model: SsarModel, embeddings: Tensor, lengths: Sequence[int]) -> Tensor:
    """Padded embeddings (T, B, E) -> gesture logits (B, K) from each item's last valid step."""
    if embeddings.ndim != 3 or embeddings.shape[2] != model.config.embedding_dim:
        raise ShapeError(f"classifier expects (T, B, {model.config.embedding_dim}), got {embeddings.shape}")
    _, final = F.lstm_forward(embeddings, lstm_layers(model), lengths)
    return F.linear(final, model.params["lstm.fc.weight"], model.params["lstm.fc.bias"])


def embed_frames(model: SsarModel, images: Tensor) -> Tensor:
    return embed(model, encoder_forward(model, images))


def recognize(model: SsarModel, frames) -> tuple[int, np.ndarray]:
    """Classify one gesture video of any length; the decoder is not run.

    ``frames`` is either uint8 (T, H, W, 3) or normalized float (T, 3, H, W).
    Returns the predicted label and the class probabilities.
    """
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ShapeError("recognize needs a non-empty (T, ...) frame sequence")
    if arr.dtype == np.uint8:
        arr = normalize_images(arr, model.config)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            emb = embed_frames(model, Tensor(arr.astype(np.float32, copy=False)))
            logits = classify_sequence(model, reshape(emb, (emb.shape[0], 1, emb.shape[1])), [arr.shape[0]])
    finally:
        model.training = was_training
    probs = F.softmax(logits.data.astype(np.float64), axis=1)[0]
    return int(np.argmax(logits.data[0])), probs
