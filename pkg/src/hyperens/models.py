"""Residual encoder-decoder segmentation networks, plain and hyper-generated.

Both kinds share one layer inventory (:func:`conv_sites`) and one forward
routine (:func:`unet_forward`). The plain network holds its convolution
kernels as trainable leaves; the hypernetwork produces them from the loss
hyperparameter through a mapping network and per-site dense generators.

Layout for ``kernel_depths = [c0, ..., cL]``::

    enc0:  conv(k, stride 1) -> norm -> prelu, + skip   (in -> c0)
    encl:  conv(k, stride 2) -> norm -> prelu, + skip   (c(l-1) -> cl)
    decl:  convT(2, stride 2) (c(l+1) -> cl), concat enc l, conv(k) -> norm -> prelu
    head:  conv(1) -> sigmoid
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .losses import TverskyParams
from .serialize import FormatError, read_blob, write_blob
from .tensor import Tensor, concat, no_grad

FORMAT_VERSION = 1
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "plain"
    kernel_depths: tuple[int, ...] = (8, 16, 32, 64)
    input_channels: int = 1
    kernel_size: int = 3
    hypervector_size: int = 16
    mapping_layers: int = 3
    spatial_rank: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kernel_depths", tuple(int(c) for c in self.kernel_depths))
        if self.kind not in ("plain", "hyper"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.kernel_depths or min(self.kernel_depths) <= 0:
            raise ValueError("kernel_depths must be a nonempty list of positive ints")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if self.spatial_rank != 2:
            raise ValueError("only spatial_rank 2 is supported")
        if self.kind == "hyper" and (self.hypervector_size < 1 or self.mapping_layers < 1):
            raise ValueError("hyper models need hypervector_size >= 1 and mapping_layers >= 1")

    @property
    def levels(self) -> int:
        return len(self.kernel_depths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_depths"] = list(self.kernel_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "kernel_depths": tuple(d["kernel_depths"])})


@dataclass(frozen=True)
class ConvSite:
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    padding: int
    transposed: bool = False

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.cin, self.cout, self.k, self.k)
        return (self.cout, self.cin, self.k, self.k)

    @property
    def weight_count(self) -> int:
        return self.cin * self.cout * self.k * self.k

    @property
    def fan_in(self) -> int:
        if self.transposed:
            return max(1, self.cin * self.k * self.k // (self.stride * self.stride))
        return self.cin * self.k * self.k


def conv_sites(spec: ModelSpec) -> list[ConvSite]:
    c, k = spec.kernel_depths, spec.kernel_size
    sites = []
    for lvl in range(spec.levels):
        cin = spec.input_channels if lvl == 0 else c[lvl - 1]
        stride = 1 if lvl == 0 else 2
        sites.append(ConvSite(f"enc{lvl}.conv", cin, c[lvl], k, stride, k // 2))
        if cin != c[lvl] or stride != 1:
            sites.append(ConvSite(f"enc{lvl}.skip", cin, c[lvl], 1, stride, 0))
    for lvl in reversed(range(spec.levels - 1)):
        sites.append(ConvSite(f"dec{lvl}.up", c[lvl + 1], c[lvl], 2, 2, 0, transposed=True))
        sites.append(ConvSite(f"dec{lvl}.conv", 2 * c[lvl], c[lvl], k, 1, k // 2))
    sites.append(ConvSite("head", c[0], 1, 1, 1, 0))
    return sites


def norm_sites(spec: ModelSpec) -> list[tuple[str, int]]:
    c = spec.kernel_depths
    return [(f"enc{l}", c[l]) for l in range(spec.levels)] + [
        (f"dec{l}", c[l]) for l in reversed(range(spec.levels - 1))
    ]


ConvParams = dict[str, tuple[Tensor, Tensor]]


def unet_forward(
    x: Tensor,
    spec: ModelSpec,
    conv: ConvParams,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the encoder-decoder and return sigmoid probabilities [N,1,H,W]."""
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise ValueError(f"expected input [N,{spec.input_channels},H,W], got {x.shape}")
    factor = 2 ** (spec.levels - 1)
    h, w = x.shape[2:]
    if h % factor or w % factor:
        ph, pw = (-h) % factor, (-w) % factor
        raise ValueError(
            f"spatial extents {h}x{w} must be divisible by {factor} for {spec.levels} levels; "
            f"pad by ({ph}, {pw}) pixels"
        )
    sites = {s.name: s for s in conv_sites(spec)}

    def apply(name: str, inp: Tensor) -> Tensor:
        s = sites[name]
        wt, b = conv[name]
        fn = ops.conv2d_transposed if s.transposed else ops.conv2d
        return fn(inp, wt, b, s.stride, s.padding)

    def norm_act(prefix: str, inp: Tensor) -> Tensor:
        y = ops.batch_norm(
            inp,
            params[f"{prefix}.norm.gamma"],
            params[f"{prefix}.norm.beta"],
            buffers[f"{prefix}.norm.running_mean"],
            buffers[f"{prefix}.norm.running_var"],
            training,
        )
        return ops.prelu(y, params[f"{prefix}.act.slope"])

    skips = []
    feat = x
    for lvl in range(spec.levels):
        main = norm_act(f"enc{lvl}", apply(f"enc{lvl}.conv", feat))
        shortcut = apply(f"enc{lvl}.skip", feat) if f"enc{lvl}.skip" in sites else feat
        feat = main + shortcut
        feat = ops.channel_dropout(feat, dropout, rng, training)
        skips.append(feat)
    for lvl in reversed(range(spec.levels - 1)):
        up = apply(f"dec{lvl}.up", feat)
        feat = norm_act(f"dec{lvl}", apply(f"dec{lvl}.conv", concat([up, skips[lvl]], axis=1)))
    return ops.sigmoid(apply("head", feat))


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Model:
    """Shared parameter/buffer bookkeeping."""

    spec: ModelSpec

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        self._init_conv(rng)
        for prefix, ch in norm_sites(spec):
            self._param(f"{prefix}.norm.gamma", np.ones(ch))
            self._param(f"{prefix}.norm.beta", np.zeros(ch))
            self._param(f"{prefix}.act.slope", np.full(ch, PRELU_INIT))
            self.buffers[f"{prefix}.norm.running_mean"] = np.zeros(ch)
            self.buffers[f"{prefix}.norm.running_var"] = np.ones(ch)

    def _init_conv(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing, extra = expected - set(arrays), set(arrays) - expected
        if missing or extra:
            raise FormatError(f"tensor inventory mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in arrays.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != arr.shape:
                raise FormatError(f"tensor {k!r}: shape {list(arr.shape)} but model expects {list(target.shape)}")
            target[...] = arr

    def clone_buffers(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers.items()}


class ResUNet(Model):
    def _init_conv(self, rng):
        for s in conv_sites(self.spec):
            self._param(f"{s.name}.weight", _he(rng, s.weight_shape, s.fan_in))
            self._param(f"{s.name}.bias", np.zeros(s.cout))

    def conv_params(self) -> ConvParams:
        return {s.name: (self.params[f"{s.name}.weight"], self.params[f"{s.name}.bias"]) for s in conv_sites(self.spec)}

    def forward(self, x, training=False, dropout=0.0, rng=None, buffers=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return unet_forward(
            x, self.spec, self.conv_params(), self.params, self.buffers if buffers is None else buffers,
            training, dropout, rng,
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x)).data


class HyperResUNet(Model):
    """Hypernetwork whose primary network is a :class:`ResUNet`.

    Trainable state: mapping network, the two dense generators per
    convolution site, and the h-independent norm/PReLU parameters.
    """

    def _init_conv(self, rng):
        hv = self.spec.hypervector_size
        din = 2
        for i in range(self.spec.mapping_layers):
            self._param(f"mapping.{i}.weight", _he(rng, (hv, din), din))
            self._param(f"mapping.{i}.bias", np.zeros(hv))
            din = hv
        for s in conv_sites(self.spec):
            std = np.sqrt(2.0 / s.fan_in)
            self._param(f"{s.name}.wgen.weight", rng.normal(0.0, std / np.sqrt(hv), size=(s.weight_count, hv)))
            self._param(f"{s.name}.wgen.bias", rng.normal(0.0, std, size=s.weight_count))
            self._param(f"{s.name}.bgen.weight", rng.normal(0.0, 0.01 / np.sqrt(hv), size=(s.cout, hv)))
            self._param(f"{s.name}.bgen.bias", np.zeros(s.cout))

    def hypervector(self, h: TverskyParams) -> Tensor:
        return mapping_forward(h, self.params, self.spec.mapping_layers)

    def generate(self, h: TverskyParams) -> ConvParams:
        z = self.hypervector(h)
        return {s.name: hyperconv_generate(z, s, self.params) for s in conv_sites(self.spec)}

    def forward(self, x, h: TverskyParams, training=False, dropout=0.0, rng=None, buffers=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return unet_forward(
            x, self.spec, self.generate(h), self.params, self.buffers if buffers is None else buffers,
            training, dropout, rng,
        )

    def predict(self, x: np.ndarray, h: TverskyParams, buffers=None) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x), h, buffers=buffers).data

    def export_plain(self, h: TverskyParams) -> ResUNet:
        """Plain network carrying the kernels generated for ``h``."""
        plain = ResUNet(ModelSpec(**{**self.spec.to_dict(), "kind": "plain"}))
        with no_grad():
            generated = self.generate(h)
        arrays = {}
        for name, (w, b) in generated.items():
            arrays[f"{name}.weight"] = w.data
            arrays[f"{name}.bias"] = b.data
        for k, p in self.params.items():
            if ".norm." in k or ".act." in k:
                arrays[k] = p.data
        arrays.update(self.buffers)
        plain.load_arrays(arrays)
        return plain


def mapping_forward(h: TverskyParams, params: dict[str, Tensor], layers: int) -> Tensor:
    """Dense+ReLU stack mapping (alpha, beta) to the hypervector [1, hv]."""
    z = Tensor(h.as_array())
    for i in range(layers):
        z = ops.relu(ops.dense(z, params[f"mapping.{i}.weight"], params[f"mapping.{i}.bias"]))
    return z


def hyperconv_generate(z: Tensor, site: ConvSite, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    w = ops.dense(z, params[f"{site.name}.wgen.weight"], params[f"{site.name}.wgen.bias"])
    b = ops.dense(z, params[f"{site.name}.bgen.weight"], params[f"{site.name}.bgen.bias"])
    return w.reshape(site.weight_shape), b.reshape(site.cout)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return HyperResUNet(spec, seed) if spec.kind == "hyper" else ResUNet(spec, seed)


def count_params(spec: ModelSpec) -> int:
    """Trainable scalar count, computed from the layer inventory alone."""
    norm = sum(3 * ch for _, ch in norm_sites(spec))
    if spec.kind == "plain":
        return norm + sum(s.weight_count + s.cout for s in conv_sites(spec))
    hv = spec.hypervector_size
    mapping = (2 * hv + hv) + (spec.mapping_layers - 1) * (hv * hv + hv)
    gens = sum((hv + 1) * s.weight_count + (hv + 1) * s.cout for s in conv_sites(spec))
    return norm + mapping + gens


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    model: Model
    metadata: dict = field(default_factory=dict)
    optimizer: dict | None = None


def save_checkpoint(model: Model, path, metadata: dict | None = None, optimizer=None) -> Path:
    """Write ``manifest`` + ``weights.bin`` into directory ``path``.

    ``optimizer`` may be an :class:`~hyperens.optim.AdamState`; its moments
    are stored after the model tensors.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"param/{k}": p.data for k, p in model.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    opt_meta = None
    if optimizer is not None:
        opt_meta = {
            "t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
        }
        for k in sorted(optimizer.m):
            tensors[f"adam_m/{k}"] = optimizer.m[k]
            tensors[f"adam_v/{k}"] = optimizer.v[k]
    table = write_blob(path / "weights.bin", tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "metadata": metadata or {},
        "optimizer": opt_meta,
        "tensors": table,
    }
    (path / "manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    from .optim import AdamState

    path = Path(path)
    if not (path / "manifest").is_file():
        raise FileNotFoundError(f"no checkpoint manifest under {path}")
    manifest = json.loads((path / "manifest").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    spec = ModelSpec.from_dict(manifest["spec"])
    if kind is not None and spec.kind != kind:
        raise FormatError(f"{path}: checkpoint holds a {spec.kind!r} model, expected {kind!r}")
    arrays = read_blob(path / "weights.bin", manifest["tensors"])
    model = build_model(spec)
    model.load_arrays(
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
    )
    opt = None
    if manifest.get("optimizer"):
        opt = AdamState(**manifest["optimizer"])
        opt.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return Checkpoint(model=model, metadata=manifest["metadata"], optimizer=opt)
