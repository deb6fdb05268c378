"""
Dual-decoder U-Net with the tri-prompt dual-attention fusion (TDF) block.

Parameter ownership:
    theta   -> ``encoder.*`` and ``tdf.*`` (prompts and attention gains included)
    phi     -> ``decoder.*``, ``head.*``, ``mlp.*``
    phi_bar -> ``aux_decoder.*``, ``aux_head.*``

Flattening order: within each partition, trainable parameters come first in module
attribute order, followed by the batch-norm running statistics. The order is written
to the checkpoint manifest.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Parameter, Tensor
from errors import ShapeError
from formats import load_tensor, read_json, save_tensor, write_json
from weak_labels import Sparsity, asp_encode

logger = logging.getLogger(__name__)

THETA_PREFIXES = ("encoder.", "tdf.")
PHI_PREFIXES = ("decoder.", "head.", "mlp.")
PHI_BAR_PREFIXES = ("aux_decoder.", "aux_head.")
FUSION_MODES = ("none", "ca", "sa", "da")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _param(values: np.ndarray) -> Parameter:
    return Parameter(np.asarray(values, dtype=np.float32))


class Module:
    """Tiny container that walks Parameters, buffers and child modules in attribute order"""

    training = True

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found = []
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                found.append((prefix + name, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    found.extend(child.named_parameters(f"{prefix}{name}.{i}."))
        return found

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        found = []
        for name, value in vars(self).items():
            if name.startswith("running_") and isinstance(value, np.ndarray):
                found.append((prefix + name, value))
            elif isinstance(value, Module):
                found.extend(value.named_buffers(f"{prefix}{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    found.extend(child.named_buffers(f"{prefix}{name}.{i}."))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for child in value:
                    if isinstance(child, Module):
                        child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, bias: bool = True):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(d_out, d_in)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv3x3 -> batch-norm -> leaky-relu"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.norm = BatchNorm2d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(self.norm(self.conv(x)))


class DoubleConv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.first = ConvBlock(c_in, c_out, rng)
        self.second = ConvBlock(c_out, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class Encoder(Module):
    def __init__(self, in_channels: int, channels: List[int], rng: np.random.Generator):
        self.levels = [DoubleConv(in_channels, channels[0], rng)]
        for c_prev, c in zip(channels[:-1], channels[1:]):
            self.levels.append(DoubleConv(c_prev, c, rng))

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        skips = []
        for i, level in enumerate(self.levels):
            if i > 0:
                x = ad.max_pool2x2(x)
            x = level(x)
            skips.append(x)
        return skips[-1], skips[:-1]


class UpBlock(Module):
    """nearest x2 upsample -> conv1x1 -> concat skip -> double conv"""

    def __init__(self, c_in: int, c_skip: int, rng: np.random.Generator):
        self.reduce = Conv2d(c_in, c_skip, 1, rng)
        self.fuse = DoubleConv(2 * c_skip, c_skip, rng)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.reduce(ad.upsample_nearest(x, 2))
        return self.fuse(ad.concat([x, skip], axis=1))


class Decoder(Module):
    """Returns the pre-head feature map at input resolution"""

    def __init__(self, bottleneck_channels: int, channels: List[int], rng: np.random.Generator):
        self.ups = []
        c_in = bottleneck_channels
        for c_skip in reversed(channels[:-1]):
            self.ups.append(UpBlock(c_in, c_skip, rng))
            c_in = c_skip

    def __call__(self, x: Tensor, skips: List[Tensor]) -> Tensor:
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return x


# ---------------------------------------------------------------------------
# Prompts and TDF
# ---------------------------------------------------------------------------


@dataclass
class PromptSet:
    """UKP (1 x H x W), DDP (N x H x W) and the fixed one-hot ASP (3 x H x W)"""

    ukp: Optional[Tensor]
    ddp: Tensor
    asp: Tensor

    def local_prompt(self, client_id: int, ukp_on: bool = True, asp_on: bool = True) -> Tensor:
        n, h, w = self.ddp.shape
        if not 0 <= client_id < n:
            raise ValueError(f"client_id {client_id} outside [0, {n})")
        zeros = np.zeros((1, h, w), dtype=self.ddp.dtype)
        ukp = self.ukp if ukp_on and self.ukp is not None else Tensor(zeros)
        asp = self.asp if asp_on else Tensor(np.zeros((3, h, w), dtype=self.ddp.dtype))
        ddp_i = ad.getitem(self.ddp, slice(client_id, client_id + 1))
        return ad.concat([ukp, ddp_i, asp], axis=0)


class TDF(Module):
    """Concatenate prompts with F, fuse with two conv blocks, then enhance with spatial and channel attention"""

    def __init__(
        self,
        channels: int,
        num_clients: int,
        size: Tuple[int, int],
        rng: np.random.Generator,
        fusion: str = "da",
        ukp_on: bool = True,
    ):
        h, w = size
        self.ukp = _param(rng.standard_normal((1, h, w))) if ukp_on else None
        self.ddp = _param(rng.standard_normal((num_clients, h, w)))
        self.block1 = ConvBlock(channels + 5, channels, rng)
        self.block2 = ConvBlock(channels, channels, rng)
        qk = max(channels // 8, 1)
        self.query = Conv2d(channels, qk, 1, rng)
        self.key = Conv2d(channels, qk, 1, rng)
        self.value = Conv2d(channels, channels, 1, rng)
        self.gamma_s = _param(np.zeros(1))
        self.gamma_c = _param(np.zeros(1))
        self.fusion = fusion
        self.last_spatial: Optional[np.ndarray] = None
        self.last_channel: Optional[np.ndarray] = None

    def spatial_attention(self, f_hat: Tensor) -> Tensor:
        b, c, h, w = f_hat.shape
        n = h * w
        q = ad.transpose(ad.reshape(self.query(f_hat), (b, -1, n)), (0, 2, 1))
        k = ad.reshape(self.key(f_hat), (b, -1, n))
        v = ad.reshape(self.value(f_hat), (b, c, n))
        s = ad.softmax(ad.matmul(q, k), axis=-1)
        self.last_spatial = s.data
        out = ad.matmul(v, ad.transpose(s, (0, 2, 1)))
        return ad.reshape(out, (b, c, h, w))

    def channel_attention(self, f_hat: Tensor) -> Tensor:
        b, c, h, w = f_hat.shape
        flat = ad.reshape(f_hat, (b, c, h * w))
        energy = ad.matmul(flat, ad.transpose(flat, (0, 2, 1)))
        attn = ad.softmax(energy, axis=-1)
        self.last_channel = attn.data
        return ad.reshape(ad.matmul(attn, flat), (b, c, h, w))

    def __call__(self, f: Tensor, prompt: Tensor) -> Tensor:
        b, c, h, w = f.shape
        if prompt.shape[1:] != (h, w):
            raise ShapeError(f"Prompt spatial size {prompt.shape[1:]} does not match feature size {(h, w)}")
        tiled = ad.mul(ad.reshape(prompt, (1,) + prompt.shape), np.ones((b, 1, 1, 1), dtype=f.dtype))
        f_hat = self.block2(self.block1(ad.concat([f, tiled], axis=1)))
        spatial = f_hat
        channel = f_hat
        if self.fusion in ("sa", "da"):
            spatial = f_hat + self.gamma_s * self.spatial_attention(f_hat)
        if self.fusion in ("ca", "da"):
            channel = f_hat + self.gamma_c * self.channel_attention(f_hat)
        f_tilde = spatial + channel
        return ad.concat([f, f_tilde], axis=1)


class PromptMLP(Module):
    """Two linear layers applied per spatial position; sigmoid output modulates the pre-head features"""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, max(d_in // 4, 1), rng)
        self.fc2 = Linear(max(d_in // 4, 1), d_out, rng)

    def __call__(self, f_star: Tensor, factor: int) -> Tensor:
        b, c, h, w = f_star.shape
        # A per-position MLP commutes with nearest upsampling, so it runs at bottleneck resolution.
        tokens = ad.reshape(ad.transpose(f_star, (0, 2, 3, 1)), (b * h * w, c))
        hidden = ad.relu(self.fc1(tokens))
        out = ad.sigmoid(self.fc2(hidden))
        out = ad.transpose(ad.reshape(out, (b, h, w, -1)), (0, 3, 1, 2))
        return ad.upsample_nearest(out, factor) if factor > 1 else out


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    channels_base: int = 16
    depth: int = 4
    max_channels: int = 128
    num_classes: int = 2
    num_clients: int = 1
    in_channels: int = 1
    image_size: Tuple[int, int] = (64, 64)
    seed: int = 0
    tdf_on: bool = True
    dual_decoder: bool = True
    ukp_on: bool = True
    asp_on: bool = True
    fusion: str = "da"

    @property
    def channels(self) -> List[int]:
        return [min(self.channels_base * 2**level, self.max_channels) for level in range(self.depth + 1)]

    @property
    def bottleneck_size(self) -> Tuple[int, int]:
        return (self.image_size[0] >> self.depth, self.image_size[1] >> self.depth)


@dataclass
class ParamPartition:
    """Flat float32 vectors for the globally shared and the two personalized parts"""

    theta: np.ndarray
    phi: np.ndarray
    phi_bar: np.ndarray

    def copy(self) -> "ParamPartition":
        return ParamPartition(self.theta.copy(), self.phi.copy(), self.phi_bar.copy())

    @property
    def total(self) -> int:
        return self.theta.size + self.phi.size + self.phi_bar.size


@dataclass
class ManifestEntry:
    name: str
    shape: Tuple[int, ...]
    group: str
    offset: int = 0
    is_buffer: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _group_of(name: str) -> str:
    if name.startswith(PHI_BAR_PREFIXES):
        return "phi_bar"
    if name.startswith(THETA_PREFIXES):
        return "theta"
    if name.startswith(PHI_PREFIXES):
        return "phi"
    raise ValueError(f"Parameter {name} belongs to no partition")


class SegModel(Module):
    """U-Net encoder, optional TDF, main decoder (+MLP modulation) and optional auxiliary decoder"""

    def __init__(self, config: ModelConfig):
        self.config = config
        ch = config.channels
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        rngs = [np.random.default_rng(s) for s in seeds]
        self.encoder = Encoder(config.in_channels, ch, rngs[0])
        bottleneck = ch[-1]
        self.tdf = None
        if config.tdf_on:
            self.tdf = TDF(
                bottleneck, config.num_clients, config.bottleneck_size, rngs[1], config.fusion, config.ukp_on
            )
            bottleneck = 2 * ch[-1]
        self.decoder = Decoder(bottleneck, ch, rngs[2])
        self.head = Conv2d(ch[0], config.num_classes, 3, rngs[2])
        self.mlp = PromptMLP(bottleneck, ch[0], rngs[3]) if config.tdf_on else None
        self.aux_decoder = None
        self.aux_head = None
        if config.dual_decoder:
            self.aux_decoder = Decoder(bottleneck, ch, rngs[4])
            self.aux_head = Conv2d(ch[0], config.num_classes, 3, rngs[4])
        self.manifest = self._build_manifest()

    # -- prompts / fusion -------------------------------------------------

    def prompts(self, sparsity: Sparsity) -> PromptSet:
        if self.tdf is None:
            raise ValueError("Model was built without the TDF block; it has no prompts")
        h, w = self.config.bottleneck_size
        asp = asp_encode(sparsity, h, w)
        return PromptSet(ukp=self.tdf.ukp, ddp=self.tdf.ddp, asp=asp)

    def tdf_fuse(self, f: Tensor, prompts: PromptSet, client_id: int) -> Tuple[Tensor, Tensor]:
        """Return the context-injected feature F* (2C channels) and the MLP modulation map"""
        prompt = prompts.local_prompt(client_id, self.config.ukp_on, self.config.asp_on)
        f_star = self.tdf(f, prompt)
        mlp_out = self.mlp(f_star, 2**self.config.depth)
        return f_star, mlp_out

    # -- forward ----------------------------------------------------------

    def forward(
        self,
        image: Union[Tensor, np.ndarray],
        client_id: int = 0,
        sparsity: Sparsity = Sparsity.SPARSE,
        prompts: Optional[PromptSet] = None,
    ) -> Tuple[Tensor, Optional[Tensor]]:
        """Class-probability maps (p_M, p_A); p_A is None without the auxiliary decoder"""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        h, w = x.shape[2:]
        if (h, w) != tuple(self.config.image_size):
            raise ShapeError(f"Model expects {tuple(self.config.image_size)} inputs, got {(h, w)}")
        f, skips = self.encoder(x)
        modulation = None
        if self.tdf is not None:
            prompts = prompts if prompts is not None else self.prompts(sparsity)
            f, modulation = self.tdf_fuse(f, prompts, client_id)
        feats = self.decoder(f, skips)
        if modulation is not None:
            feats = feats * modulation
        p_main = ad.softmax(self.head(feats), axis=1)
        p_aux = None
        if self.aux_decoder is not None:
            p_aux = ad.softmax(self.aux_head(self.aux_decoder(f, skips)), axis=1)
        return p_main, p_aux

    __call__ = forward

    # -- partition ----------------------------------------------------------

    def _entries(self) -> List[Tuple[str, Union[Parameter, np.ndarray], bool]]:
        entries = [(n, p, False) for n, p in self.named_parameters()]
        entries += [(n, b, True) for n, b in self.named_buffers()]
        return entries

    def _build_manifest(self) -> List[ManifestEntry]:
        manifest = []
        offsets = {"theta": 0, "phi": 0, "phi_bar": 0}
        for group in ("theta", "phi", "phi_bar"):
            for name, value, is_buffer in self._entries():
                if _group_of(name) != group:
                    continue
                shape = tuple(value.shape)
                entry = ManifestEntry(name, shape, group, offsets[group], is_buffer)
                offsets[group] += entry.size
                manifest.append(entry)
        return manifest

    def _lookup(self) -> Dict[str, Tuple[Union[Parameter, np.ndarray], bool]]:
        return {name: (value, is_buffer) for name, value, is_buffer in self._entries()}

    def group_size(self, group: str) -> int:
        return sum(e.size for e in self.manifest if e.group == group)

    def num_parameters(self) -> int:
        """Every flattened entry (trainable parameters plus batch-norm running statistics)"""
        return sum(e.size for e in self.manifest)

    def num_trainable(self) -> int:
        return sum(e.size for e in self.manifest if not e.is_buffer)

    def no_decay_ids(self) -> set:
        """ids of parameters AdamW must not decay: prompts, attention gains, norm affines"""
        skip = set()
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("ukp", "ddp", "gamma_s", "gamma_c") or ".norm." in f".{name}":
                skip.add(id(p))
        return skip

    def payload_bytes(self, groups: Tuple[str, ...]) -> int:
        return 4 * sum(self.group_size(g) for g in groups)

    def flat_grad(self, group: str) -> np.ndarray:
        """Gradient laid out like the ``group`` vector; running statistics and unused parameters get 0"""
        out = np.zeros(self.group_size(group), dtype=np.float32)
        lookup = self._lookup()
        for e in self.manifest:
            if e.group != group or e.is_buffer:
                continue
            grad = lookup[e.name][0].grad
            if grad is not None:
                out[e.offset : e.offset + e.size] = grad.reshape(-1)
        return out

    def main_to_aux(self, phi: np.ndarray) -> np.ndarray:
        """Re-lay a main-decoder vector (decoder + head, MLP dropped) in the auxiliary layout"""
        if self.aux_decoder is None:
            return np.zeros(0, dtype=np.float32)
        by_name = {e.name: e for e in self.manifest if e.group == "phi"}
        out = np.empty(self.group_size("phi_bar"), dtype=np.float32)
        for e in self.manifest:
            if e.group != "phi_bar":
                continue
            src = by_name[e.name.replace("aux_decoder.", "decoder.", 1).replace("aux_head.", "head.", 1)]
            out[e.offset : e.offset + e.size] = phi[src.offset : src.offset + src.size]
        return out


def build_model(config: ModelConfig) -> SegModel:
    """Construct a deterministic model from ``config``; input dims must be divisible by 2^depth"""
    h, w = config.image_size
    step = 2**config.depth
    if h % step or w % step:
        raise ShapeError(f"Input size {h}x{w} is not divisible by 2^depth = {step}")
    if config.fusion not in FUSION_MODES:
        raise ValueError(f"Unknown fusion mode {config.fusion!r}; expected one of {FUSION_MODES}")
    if config.dual_decoder and not config.tdf_on:
        logger.debug("Dual decoder without TDF: auxiliary decoder consumes the raw bottleneck")
    model = SegModel(config)
    logger.debug(
        "Built model: %d entries (theta=%d, phi=%d, phi_bar=%d)",
        model.num_parameters(),
        model.group_size("theta"),
        model.group_size("phi"),
        model.group_size("phi_bar"),
    )
    return model


def partition(model: SegModel) -> ParamPartition:
    vectors = {g: np.empty(model.group_size(g), dtype=np.float32) for g in ("theta", "phi", "phi_bar")}
    lookup = model._lookup()
    for e in model.manifest:
        value, is_buffer = lookup[e.name]
        data = value if is_buffer else value.data
        vectors[e.group][e.offset : e.offset + e.size] = data.reshape(-1)
    return ParamPartition(vectors["theta"], vectors["phi"], vectors["phi_bar"])


def load(model: SegModel, theta: np.ndarray, phi: np.ndarray, phi_bar: np.ndarray) -> None:
    """Write the three vectors back into the model (bitwise inverse of :func:`partition`)"""
    vectors = {"theta": theta, "phi": phi, "phi_bar": phi_bar}
    for group, vec in vectors.items():
        expected = model.group_size(group)
        if vec.size != expected:
            raise ShapeError(f"{group} vector has {vec.size} entries, model expects {expected}")
    lookup = model._lookup()
    for e in model.manifest:
        value, is_buffer = lookup[e.name]
        chunk = vectors[e.group][e.offset : e.offset + e.size].reshape(e.shape)
        if is_buffer:
            value[...] = chunk
        else:
            value.data = chunk.astype(np.float32, copy=True)


def load_partition(model: SegModel, parts: ParamPartition) -> None:
    load(model, parts.theta, parts.phi, parts.phi_bar)


def prompt_vectors(model: SegModel, theta: np.ndarray, client_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Extract (p_U, p_D[client_id]) as flat arrays from a theta vector; p_U is empty when UKP is off"""
    by_name = {e.name: e for e in model.manifest if e.group == "theta"}
    ddp = by_name["tdf.ddp"]
    ddp_arr = theta[ddp.offset : ddp.offset + ddp.size].reshape(ddp.shape)
    ukp = by_name.get("tdf.ukp")
    ukp_arr = theta[ukp.offset : ukp.offset + ukp.size] if ukp is not None else np.zeros(0, dtype=np.float32)
    return ukp_arr.reshape(-1), ddp_arr[client_id].reshape(-1)


def save_checkpoint(directory: Union[str, Path], model: SegModel, parts: Optional[ParamPartition] = None) -> None:
    """Three FLT1 files (theta/phi/phi_bar) plus ``model.json`` with config and flattening manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parts = parts if parts is not None else partition(model)
    save_tensor(directory / "theta.flt", parts.theta)
    save_tensor(directory / "phi.flt", parts.phi)
    save_tensor(directory / "phi_bar.flt", parts.phi_bar)
    write_json(
        directory / "model.json",
        {
            "config": asdict(model.config),
            "manifest": [asdict(e) for e in model.manifest],
        },
    )


def load_checkpoint(directory: Union[str, Path]) -> SegModel:
    directory = Path(directory)
    meta = read_json(directory / "model.json")
    cfg = dict(meta["config"])
    cfg["image_size"] = tuple(cfg["image_size"])
    model = build_model(ModelConfig(**cfg))
    load(
        model,
        load_tensor(directory / "theta.flt"),
        load_tensor(directory / "phi.flt"),
        load_tensor(directory / "phi_bar.flt"),
    )
    return model
