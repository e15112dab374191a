"""LadderMini: a small dense feature extractor with lateral connections.

A stride-2 stem followed by four stages (two 3x3 conv+bn+relu, then a
stride-2 downsample) produces features at strides 4, 8, 16 and 32. All
downsampling is 2x2 average pooling so that every convolution keeps the
exact output-size arithmetic of the conv contract. Spatial pyramid pooling
enlarges the receptive field at stride 32, and three upsampling blocks blend
the low-resolution path with lateral projections of the backbone features
back up to stride 4, where the prediction heads sit.

Auxiliary classification outputs are tapped from the SPP output and each
upsampling block, giving logits at strides 32, 16, 8 and 4.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD_KINDS = ("multiclass", "multilabel", "cplus1", "twohead", "confidence")
SPP_GRIDS = (1, 2, 4)


@dataclass
class ModelConfig:
    num_classes: int
    head_kind: str = "multiclass"
    backbone_widths: tuple = (32, 64, 128, 128)
    dropout_p: float = 0.0
    input_channels: int = 3

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(
                f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.backbone_widths) != 4:
            raise ValueError("backbone_widths must list 4 stage widths")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)

    @property
    def num_logits(self):
        """Classifier channel count: C, or C+1 for the explicit-outlier head."""
        return self.num_classes + (1 if self.head_kind == "cplus1" else 0)


@dataclass
class ModelOutput:
    class_logits: Tensor
    aux_logits: list
    outlier_logits: Tensor | None = None
    confidence: Tensor | None = None


def _layer_rng(seed, name):
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    )


class Conv2d:
    """3x3/1x1 convolution with bias, He fan-in initialization."""

    def __init__(self, name, cin, cout, k, stride, seed, dtype):
        self.stride = stride
        self.padding = k // 2
        rng = _layer_rng(seed, name)
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(
            (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.params = [(f"{name}.weight", self.weight), (f"{name}.bias", self.bias)]
        self.buffers = []

    def __call__(self, x, ctx):
        y = ad.conv2d(x, self.weight, self.stride, self.padding)
        return ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))


class BatchNorm2d:
    def __init__(self, name, channels, dtype, momentum=0.9, eps=1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.params = [(f"{name}.gamma", self.gamma), (f"{name}.beta", self.beta)]
        self.buffers = [
            (f"{name}.running_mean", self.running_mean),
            (f"{name}.running_var", self.running_var),
        ]

    def __call__(self, x, ctx):
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            train=ctx.train_mode,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=ctx.update_stats,
        )


class ConvBNRelu:
    def __init__(self, name, cin, cout, k, stride, seed, dtype):
        self.conv = Conv2d(f"{name}.conv", cin, cout, k, stride, seed, dtype)
        self.bn = BatchNorm2d(f"{name}.bn", cout, dtype)
        self.params = self.conv.params + self.bn.params
        self.buffers = self.bn.buffers

    def __call__(self, x, ctx):
        return ad.relu(self.bn(self.conv(x, ctx), ctx))


class Downsample2x:
    """Stride-2 downsampling via exact 2x2 average pooling."""

    params = []
    buffers = []

    def __call__(self, x, ctx):
        return ad.avg_pool_grid(x, x.shape[2] // 2, x.shape[3] // 2)


class _ForwardCtx:
    def __init__(self, train_mode, rng, mc_dropout, update_stats, dropout_p):
        self.train_mode = train_mode
        self.rng = rng
        self.update_stats = update_stats and train_mode
        self.dropout_active = dropout_p > 0 and (train_mode or mc_dropout)
        self.dropout_p = dropout_p

    def drop(self, x):
        if not self.dropout_active:
            return x
        if self.rng is None:
            raise ValueError("dropout is active but no rng was provided")
        return ad.dropout(x, self.dropout_p, self.rng)


class Model:
    """Built LadderMini instance: immutable for inference, mutable in training."""

    def __init__(self, config, seed, dtype=np.float32):
        self.config = config
        self.seed = seed
        w = config.backbone_widths
        up = w[1]  # width of the SPP output and the upsampling path
        nl = config.num_logits
        mk_cbr = lambda name, cin, cout, k=3, stride=1: ConvBNRelu(
            name, cin, cout, k, stride, seed, dtype
        )

        self.stem = mk_cbr("backbone.stem", config.input_channels, w[0])
        self.stem_down = Downsample2x()
        self.stages = []
        cin = w[0]
        for i, width in enumerate(w):
            blocks = [
                mk_cbr(f"backbone.stage{i + 1}.conv1", cin, width),
                mk_cbr(f"backbone.stage{i + 1}.conv2", width, width),
                Downsample2x(),
            ]
            self.stages.append(blocks)
            cin = width

        self.spp_fuse = mk_cbr("spp.fuse", w[3] * (1 + len(SPP_GRIDS)), up, k=1)
        self.laterals = [
            Conv2d(f"up{i + 1}.lateral", cin, up, 1, 1, seed, dtype)
            for i, cin in enumerate((w[2], w[1], w[0]))
        ]
        self.up_blocks = [mk_cbr(f"up{i + 1}.blend", up, up) for i in range(3)]

        self.aux_heads = [
            Conv2d(f"aux.s{s}", up, nl, 1, 1, seed, dtype) for s in (4, 8, 16, 32)
        ]
        self.class_head = Conv2d("head.class", up, nl, 1, 1, seed, dtype)
        self.outlier_head = None
        self.confidence_head = None
        if config.head_kind == "twohead":
            self.outlier_head = Conv2d("head.outlier", up, 2, 1, 1, seed, dtype)
        elif config.head_kind == "confidence":
            self.confidence_head = Conv2d("head.confidence", up, 1, 1, 1, seed, dtype)

    def _modules(self):
        yield self.stem
        for blocks in self.stages:
            yield from blocks
        yield self.spp_fuse
        for lat, blk in zip(self.laterals, self.up_blocks):
            yield lat
            yield blk
        yield from self.aux_heads
        yield self.class_head
        if self.outlier_head is not None:
            yield self.outlier_head
        if self.confidence_head is not None:
            yield self.confidence_head

    def named_params(self):
        out = OrderedDict()
        for m in self._modules():
            for name, t in m.params:
                out[name] = t
        return out

    def named_buffers(self):
        out = OrderedDict()
        for m in self._modules():
            for name, b in m.buffers:
                out[name] = b
        return out

    @property
    def num_params(self):
        return sum(t.size for t in self.named_params().values())

    def state(self):
        """Parameters plus running statistics, ready for checkpointing."""
        out = OrderedDict()
        for name, t in self.named_params().items():
            out[name] = t.data
        for name, b in self.named_buffers().items():
            out[name] = b
        return out

    def load_state(self, state):
        own = self.state()
        missing = [k for k in own if k not in state]
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:4]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(
                    f"tensor {name}: checkpoint shape {src.shape} does not "
                    f"match model shape {arr.shape}"
                )
            arr[...] = src.astype(arr.dtype)

    def forward(
        self, image, train_mode=False, rng=None, mc_dropout=False, update_stats=True
    ):
        """Run the network; H and W must be divisible by 32."""
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(
                f"input extents must be divisible by 32, got {h}x{w}"
            )
        ctx = _ForwardCtx(
            train_mode, rng, mc_dropout, update_stats, self.config.dropout_p
        )
        x = self.stem_down(self.stem(image, ctx), ctx)
        feats = []  # stage outputs at strides 4, 8, 16, 32
        for blocks in self.stages:
            for blk in blocks:
                x = blk(x, ctx)
            x = ctx.drop(x)
            feats.append(x)

        # spatial pyramid pooling over the stride-32 features
        fh, fw = feats[3].shape[2], feats[3].shape[3]
        pooled = [feats[3]]
        for g in SPP_GRIDS:
            gh, gw = min(g, fh), min(g, fw)
            p = ad.avg_pool_grid(feats[3], gh, gw)
            pooled.append(ad.replicate_upsample(p, fh, fw))
        x = ctx.drop(self.spp_fuse(ad.concat(pooled, axis=1), ctx))

        aux = [self.aux_heads[3](x, ctx)]  # stride 32
        for lat, blk, feat, head in zip(
            self.laterals,
            self.up_blocks,
            (feats[2], feats[1], feats[0]),
            (self.aux_heads[2], self.aux_heads[1], self.aux_heads[0]),
        ):
            x = ad.add(ad.bilinear_upsample(x, 2), lat(feat, ctx))
            x = ctx.drop(blk(x, ctx))
            aux.append(head(x, ctx))
        aux.reverse()  # strides 4, 8, 16, 32

        out = ModelOutput(class_logits=self.class_head(x, ctx), aux_logits=aux)
        if self.outlier_head is not None:
            out.outlier_logits = self.outlier_head(x, ctx)
        if self.confidence_head is not None:
            out.confidence = ad.sigmoid(self.confidence_head(x, ctx))
        return out


def build_model(config, seed, dtype=np.float32):
    """Deterministically initialized model; same seed, same bits.

    Each layer draws from its own stream keyed by (seed, layer name), so
    models sharing a seed share the initialization of every layer they have
    in common regardless of head kind.
    """
    return Model(config, int(seed), dtype)
