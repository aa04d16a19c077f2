"""The Y-shaped network: encoder blocks, classifier head, projector and discriminator."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nce
from .autodiff import ops
from .autodiff.nn import BatchNorm, Linear, ParamSet, Whitening, activation
from .autodiff.optim import Optimizer
from .autodiff.tensor import ShapeError, Tensor, backward, no_grad
from .nce import PER_LOCATION, WHOLE_VECTOR, NoiseConfig

CHECKPOINT_MAGIC = b"NCTTTCKP"
CHECKPOINT_FORMAT = 1
BN_POLICIES = ("batch", "running")
PROJECTOR_NORMS = ("none", "batchnorm", "whiten")


@dataclass
class BlockSpec:
    width: int
    batchnorm: bool = True
    activation: str = "relu"


@dataclass
class ModelSpec:
    in_channels: int
    blocks: list[BlockSpec]
    num_classes: int
    attach_layer: int = 1
    projector_dim: int = 4
    disc_hidden: int = 64
    disc_activation: str = "relu"
    disc_batchnorm: bool = False
    projector_norm: str = "whiten"
    projector_shrink: float = 0.0
    spatial: tuple[int, int] = (1, 1)
    noise_mode: str = PER_LOCATION
    lam: float = 1.0

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        self.spatial = tuple(int(s) for s in self.spatial)
        if not self.blocks:
            raise ValueError("encoder needs at least one block")
        if not 1 <= self.attach_layer <= len(self.blocks):
            raise ValueError(f"attach_layer must lie in [1, {len(self.blocks)}], got {self.attach_layer}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.noise_mode not in nce.NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {nce.NOISE_MODES}, got {self.noise_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.projector_shrink < 0:
            raise ValueError(f"projector_shrink must be >= 0, got {self.projector_shrink}")
        if self.projector_norm not in PROJECTOR_NORMS:
            raise ValueError(f"projector_norm must be one of {PROJECTOR_NORMS}, got {self.projector_norm!r}")
        for b in self.blocks:
            activation(b.activation)
        activation(self.disc_activation)

    @property
    def locations(self) -> int:
        return self.spatial[0] * self.spatial[1]

    @property
    def noise_dim(self) -> int:
        """Dimension of the space the noise is added in."""
        if self.noise_mode == PER_LOCATION:
            return self.projector_dim
        return self.projector_dim * self.locations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial"] = list(self.spatial)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**d)


@dataclass
class ModelState:
    """Copied parameter values and BatchNorm buffers; optimizer state is not included."""

    arrays: "OrderedDict[str, np.ndarray]"
    version: str
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        return hash_arrays(self.arrays)


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class NCTTTModel:
    def __init__(self, spec: ModelSpec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        p = self.params
        self.blocks: list[tuple[Linear, BatchNorm | None, object]] = []
        width = spec.in_channels
        for i, b in enumerate(spec.blocks):
            lin = Linear(p, f"encoder.{i}", width, b.width, rng)
            bn = BatchNorm(p, f"encoder.{i}.bn", b.width) if b.batchnorm else None
            self.blocks.append((lin, bn, activation(b.activation)))
            width = b.width
        self.head = Linear(p, "head", width, spec.num_classes, rng)
        attach_width = spec.blocks[spec.attach_layer - 1].width
        self.projector = Linear(p, "projector", attach_width, spec.projector_dim, rng)
        if spec.projector_norm == "batchnorm":
            self.projector_norm = BatchNorm(p, "projector.norm", spec.projector_dim, affine=False)
        elif spec.projector_norm == "whiten":
            self.projector_norm = Whitening(p, "projector.norm", spec.projector_dim, spec.projector_shrink)
        else:
            self.projector_norm = None
        self.disc_in = Linear(p, "disc.0", spec.noise_dim, spec.disc_hidden, rng)
        self.disc_bn = BatchNorm(p, "disc.0.bn", spec.disc_hidden) if spec.disc_batchnorm else None
        self.disc_act = activation(spec.disc_activation)
        self.disc_out = Linear(p, "disc.1", spec.disc_hidden, 1, rng)

    # -- bookkeeping -----------------------------------------------------------------
    @property
    def version(self) -> str:
        blob = json.dumps(self.spec.to_dict(), sort_keys=True).encode()
        return f"ncttt-{CHECKPOINT_FORMAT}:{hashlib.sha256(blob).hexdigest()[:16]}"

    def block_prefixes(self, upto: int) -> list[str]:
        return [f"encoder.{i}." for i in range(upto)]

    def adapt_params(self) -> "OrderedDict[str, Tensor]":
        """Parameters of encoder blocks 1..attach_layer, BatchNorm affine included."""
        return self.params.params(self.block_prefixes(self.spec.attach_layer))

    def group_hashes(self) -> dict[str, str]:
        """Digest per component; encoder blocks are reported individually."""
        groups: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in self.params.arrays().items():
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] == "encoder" else parts[0]
            groups.setdefault(key, {})[name] = arr
        return {k: hash_arrays(v) for k, v in groups.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    # -- forward pieces ---------------------------------------------------------------
    def _rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.spec.in_channels
        w, h = self.spec.spatial
        if x.ndim == 2 and self.spec.locations == 1 and x.shape[1] == c:
            return x
        if x.ndim == 4 and x.shape[1:] == (c, w, h):
            return x.transpose(0, 2, 3, 1).reshape(-1, c)
        expected = (c,) if self.spec.locations == 1 else (c, w, h)
        raise ShapeError(f"input shape {x.shape} does not match model input (N, {', '.join(map(str, expected))})")

    def encode(self, rows: np.ndarray, upto: int, bn_mode: str) -> list[Tensor]:
        feats = []
        h = Tensor(rows)
        for lin, bn, act in self.blocks[:upto]:
            h = lin(h)
            if bn is not None:
                h = bn(h, bn_mode)
            h = act(h)
            feats.append(h)
        return feats

    def _class_logits(self, feat: Tensor, n: int) -> Tensor:
        if self.spec.locations > 1:
            feat = ops.mean(ops.reshape(feat, (n, self.spec.locations, feat.shape[1])), axis=1)
        return self.head(feat)

    def project(self, feat: Tensor, n: int, bn_mode: str = "eval") -> Tensor:
        z = self.projector(feat)
        if self.projector_norm is not None:
            z = self.projector_norm(z, bn_mode)
        if self.spec.noise_mode == WHOLE_VECTOR:
            z = ops.reshape(z, (n, self.spec.noise_dim))
        return z

    def discriminate(self, z: Tensor, bn_mode: str) -> Tensor:
        h = self.disc_in(z)
        if self.disc_bn is not None:
            h = self.disc_bn(h, bn_mode)
        h = self.disc_act(h)
        return ops.reshape(self.disc_out(h), (z.shape[0],))

    # -- public operations ---------------------------------------------------------------
    def class_logits(self, x, bn_mode: str = "eval") -> Tensor:
        rows = self._rows(x)
        n = rows.shape[0] // self.spec.locations
        feats = self.encode(rows, len(self.blocks), bn_mode)
        return self._class_logits(feats[-1], n)

    def forward_classify(self, x, bn_mode: str = "eval") -> np.ndarray:
        with no_grad():
            return ops.softmax(self.class_logits(x, bn_mode), axis=1).data

    def predict(self, x, bn_mode: str = "eval") -> np.ndarray:
        with no_grad():
            return np.argmax(self.class_logits(x, bn_mode).data, axis=1)

    def _check_noise(self, cfg: NoiseConfig) -> None:
        if cfg.mode != self.spec.noise_mode or cfg.dim != self.spec.noise_dim:
            raise ValueError(
                f"noise config (mode={cfg.mode}, dim={cfg.dim}) does not match model "
                f"(mode={self.spec.noise_mode}, dim={self.spec.noise_dim})"
            )

    def _aux_from_feat(self, feat: Tensor, n: int, cfg: NoiseConfig, seed, bn_mode: str):
        z = self.project(feat, n, bn_mode)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        eps, origin, is_in = nce.sample_noise(z.shape[0], cfg, rng)
        views = ops.add(ops.take_rows(z, origin), eps)
        logits = self.discriminate(views, bn_mode)
        labels = nce.labels_from_noise((eps ** 2).sum(axis=1), is_in, cfg)
        return logits, labels

    def forward_aux(self, x, cfg: NoiseConfig, seed, bn_mode: str = "train") -> tuple[Tensor, np.ndarray]:
        """Discriminator logits and soft labels for 2M noisy views per projected feature."""
        self._check_noise(cfg)
        rows = self._rows(x)
        n = rows.shape[0] // self.spec.locations
        feat = self.encode(rows, self.spec.attach_layer, bn_mode)[-1]
        return self._aux_from_feat(feat, n, cfg, seed, bn_mode)

    def joint_loss(self, x, y, cfg: NoiseConfig, seed, lam: float | None = None,
                   bn_mode: str = "train") -> tuple[Tensor, Tensor, Tensor]:
        """Returns (supervised + lam * auxiliary, supervised, auxiliary).

        One encoder pass feeds both branches, so running statistics move once.
        """
        self._check_noise(cfg)
        lam = self.spec.lam if lam is None else lam
        rows = self._rows(x)
        n = rows.shape[0] // self.spec.locations
        feats = self.encode(rows, len(self.blocks), bn_mode)
        sup = ops.cross_entropy(self._class_logits(feats[-1], n), np.asarray(y))
        logits, labels = self._aux_from_feat(feats[self.spec.attach_layer - 1], n, cfg, seed, bn_mode)
        aux = nce.aux_loss(logits, labels)
        return ops.add(sup, ops.mul(aux, lam)), sup, aux

    def test_logits(self, x, bn_policy: str = "batch") -> Tensor:
        """Discriminator logits of the unperturbed projected test features."""
        mode = _encoder_mode(bn_policy)
        rows = self._rows(x)
        n = rows.shape[0] // self.spec.locations
        feat = self.encode(rows, self.spec.attach_layer, mode)[-1]
        return self.discriminate(self.project(feat, n, "eval"), "eval")

    def test_loss(self, x, bn_policy: str = "batch") -> Tensor:
        if np.shape(x)[0] == 0:
            raise ValueError("test_loss of an empty batch")
        return nce.test_loss(self.test_logits(x, bn_policy))

    def adapt_step(self, x, optimizer: Optimizer, bn_policy: str = "batch") -> float:
        """One optimizer step on the test-time loss.

        Only the optimizer's parameters move; gradients that reach any other
        tensor are discarded.
        """
        if np.shape(x)[0] == 0:
            raise ValueError("adapt_step on an empty batch")
        allowed = set(self.adapt_params())
        stray = [k for k in optimizer.params if k not in allowed]
        if stray:
            raise ValueError(f"optimizer holds parameters outside blocks 1..{self.spec.attach_layer}: {stray}")
        self.zero_grad()
        loss = self.test_loss(x, bn_policy)
        value = loss.item()
        backward(loss)
        optimizer.step()
        self.zero_grad()
        return value

    def ptbn_predict(self, x) -> np.ndarray:
        """Class probabilities with every encoder BatchNorm using the current batch's statistics."""
        if np.shape(x)[0] < 2:
            raise ValueError("prediction-time batch norm needs a batch of at least 2 examples")
        return self.forward_classify(x, bn_mode="batch")

    # -- state -------------------------------------------------------------------------
    def snapshot(self) -> ModelState:
        return ModelState(OrderedDict((k, v.copy()) for k, v in self.params.arrays().items()), self.version)

    def restore(self, state: ModelState) -> None:
        if state.version != self.version:
            raise ValueError(f"snapshot version {state.version} does not match model version {self.version}")
        self.params.load_arrays(state.arrays)

    def state_digest(self) -> str:
        return hash_arrays(self.params.arrays())


def _encoder_mode(bn_policy: str) -> str:
    if bn_policy == "batch":
        return "batch"
    if bn_policy == "running":
        return "eval"
    raise ValueError(f"unknown BN policy {bn_policy!r}; expected one of {BN_POLICIES}")


# -- checkpoint container ---------------------------------------------------------------------

def encode_checkpoint(model: NCTTTModel, meta: dict | None = None) -> bytes:
    """Magic, format number, JSON manifest length, manifest, then raw little-endian f8 tensors."""
    arrays = model.params.arrays()
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f8", "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": model.version,
        "spec": model.spec.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_FORMAT, len(mbytes)) + mbytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[NCTTTModel, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    fmt, mlen = struct.unpack("<IQ", data[8:20])
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {fmt}")
    manifest = json.loads(data[20:20 + mlen])
    payload = memoryview(data)[20 + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise ValueError(f"checkpoint payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    model = NCTTTModel(ModelSpec.from_dict(manifest["spec"]))
    if model.version != manifest["version"]:
        raise ValueError(f"checkpoint version {manifest['version']} does not match rebuilt model {model.version}")
    arrays = OrderedDict()
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
    model.params.load_arrays(arrays)
    return model, manifest.get("meta", {})


def save_checkpoint(model: NCTTTModel, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path) -> tuple[NCTTTModel, dict]:
    return decode_checkpoint(Path(path).read_bytes())
