"""Source training, episodic test-time adaptation, sweeps, figure data and run persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nce
from .autodiff import nn, ops
from .autodiff.optim import MultiStepLR, make_optimizer
from .autodiff.tensor import Tensor, backward, no_grad
from .data import Dataset, ShiftSpec, apply_shift, load_manifest, make_blobs, make_rings
from .model import BN_POLICIES, ModelSpec, ModelState, NCTTTModel, load_checkpoint, save_checkpoint
from .nce import NoiseConfig

RESET_POLICIES = ("per_batch", "never")
FIGURE_KINDS = ("posterior_grid", "samples_probs", "gradient_field", "beta_curve", "accuracy_curve")

# independent random streams derived from one seed
STREAM_INIT, STREAM_SOURCE, STREAM_TEST, STREAM_SHIFT, STREAM_TRAIN, STREAM_ADAPT = range(6)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


class DivergenceError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-2
    milestones: list[int] = field(default_factory=list)
    lam: float = 1.0
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(0.35, 0.7, 2))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.milestones = [int(m) for m in self.milestones]
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


@dataclass
class AdaptConfig:
    iterations: int = 20
    lr: float = 1e-3
    batch_size: int = 128
    reset: str = "per_batch"
    bn_policy: str = "batch"
    attach_layer: int | None = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.reset not in RESET_POLICIES:
            raise ValueError(f"reset must be one of {RESET_POLICIES}, got {self.reset!r}")
        if self.bn_policy not in BN_POLICIES:
            raise ValueError(f"bn_policy must be one of {BN_POLICIES}, got {self.bn_policy!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


@dataclass
class DataConfig:
    """Either a synthetic generator description or a pair of manifest paths."""

    generator: str = "blobs"
    num_classes: int = 3
    n_per_class: int = 300
    n_test_per_class: int = 300
    dim: int = 2
    class_separation: float = 6.0
    ring_noise: float = 0.1
    shift_kind: str = "rotation"
    severity: int = 4
    source_manifest: str | None = None
    target_manifest: str | None = None

    def __post_init__(self):
        if self.generator not in ("blobs", "rings"):
            raise ValueError(f"generator must be 'blobs' or 'rings', got {self.generator!r}")
        ShiftSpec(self.shift_kind, self.severity)


@dataclass
class ExperimentConfig:
    model: ModelSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.adapt, dict):
            self.adapt = AdaptConfig(**self.adapt)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "adapt": asdict(self.adapt),
            "data": asdict(self.data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = set(d) - {"model", "train", "adapt", "data"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        if "model" not in d:
            raise ValueError("config lacks the 'model' section")
        return cls(**d)

    def train_hash(self) -> str:
        """Hash of everything that determines the trained checkpoint."""
        return config_hash({"model": self.model.to_dict(), "train": asdict(self.train), "data": asdict(self.data)})

    def full_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def benchmark_config(seed: int = 0) -> ExperimentConfig:
    """The seeded shifted-blobs benchmark: 3 classes, rotation severity 4, attach layer 1."""
    from .model import BlockSpec

    spec = ModelSpec(in_channels=2, blocks=[BlockSpec(16), BlockSpec(16), BlockSpec(16)], num_classes=3,
                     attach_layer=1, projector_dim=2, disc_hidden=64)
    return ExperimentConfig(
        model=spec,
        train=TrainConfig(epochs=60, batch_size=64, lr=1e-2, noise=NoiseConfig(0.35, 0.7, 2), seed=seed),
        adapt=AdaptConfig(iterations=20, lr=0.03, batch_size=300),
        data=DataConfig(),
    )


# -- datasets ---------------------------------------------------------------------------------

def build_datasets(data: DataConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """(source train, source test, shifted target); manifests take precedence over generators."""
    if data.source_manifest and data.target_manifest:
        source = load_manifest(data.source_manifest)
        target = load_manifest(data.target_manifest)
        return source, source, target
    if data.generator == "blobs":
        source = make_blobs(data.num_classes, data.n_per_class, data.dim, data.class_separation,
                            stream_rng(seed, STREAM_SOURCE))
        test = make_blobs(data.num_classes, data.n_test_per_class, data.dim, data.class_separation,
                          stream_rng(seed, STREAM_TEST))
    else:
        source = make_rings(2 * data.n_per_class, data.ring_noise, stream_rng(seed, STREAM_SOURCE))
        test = make_rings(2 * data.n_test_per_class, data.ring_noise, stream_rng(seed, STREAM_TEST))
    target = apply_shift(test, ShiftSpec(data.shift_kind, data.severity), stream_rng(seed, STREAM_SHIFT))
    return source, test, target


# -- run records ------------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    adapt_batches: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic_dict(self) -> dict:
        """Everything except wall time, which is the one field reruns do not reproduce."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def accuracy(model: NCTTTModel, ds: Dataset, bn_mode: str = "eval") -> float:
    return float(np.mean(model.predict(ds.inputs, bn_mode) == ds.labels))


# -- source training -----------------------------------------------------------------------------

def train_source(model: NCTTTModel, source: Dataset, cfg: TrainConfig,
                 checkpoint_path=None) -> tuple[ModelState, RunRecord]:
    """Minimize supervised + lam * auxiliary loss over shuffled mini-batches."""
    if source.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {source.num_classes} classes, model expects {model.spec.num_classes}")
    model._rows(source.inputs[:1])  # shape check before any work
    start = time.perf_counter()
    opt = make_optimizer(cfg.optimizer, model.params.params(), cfg.lr)
    sched = MultiStepLR(opt, cfg.milestones) if cfg.milestones else None
    rng = stream_rng(cfg.seed, STREAM_TRAIN)
    record = RunRecord(config_hash=config_hash({"model": model.spec.to_dict(), "train": asdict(cfg)}), seed=cfg.seed)
    n = len(source)
    for epoch in range(cfg.epochs):
        if sched is not None:
            sched.set_epoch(epoch)
        perm = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if idx.size < 2:  # batch statistics are undefined for a single example
                continue
            total, sup, aux = model.joint_loss(source.inputs[idx], source.labels[idx], cfg.noise, rng, lam=cfg.lam)
            values = np.array([total.item(), sup.item(), aux.item()])
            if not np.all(np.isfinite(values)):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch}, batch {i // cfg.batch_size}: "
                    f"total={values[0]}, supervised={values[1]}, auxiliary={values[2]}"
                )
            backward(total)
            opt.step()
            sums += values
            batches += 1
        record.epochs.append({
            "epoch": epoch,
            "lr": opt.lr,
            "loss": sums[0] / batches,
            "sup_loss": sums[1] / batches,
            "aux_loss": sums[2] / batches,
            "train_accuracy": accuracy(model, source),
        })
    record.metrics = {"source_accuracy": accuracy(model, source)}
    state = model.snapshot()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, {"config_hash": record.config_hash})
    record.wall_time = time.perf_counter() - start
    return state, record


def aux_accuracy(model: NCTTTModel, ds: Dataset, cfg: NoiseConfig, seed) -> float:
    """Agreement between the discriminator's decision and the thresholded posterior label."""
    with no_grad():
        logits, labels = model.forward_aux(ds.inputs, cfg, seed, bn_mode="eval")
    return float(np.mean((logits.data > 0) == (labels > 0.5)))


# -- adaptation and evaluation ------------------------------------------------------------------------

def _batches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    perm = stream_rng(seed, STREAM_ADAPT).permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and out[-1].size < 2:  # fold a singleton tail into the previous batch
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def adapt_eval(model: NCTTTModel, state: ModelState, target: Dataset, cfg: AdaptConfig,
               seed: int = 0) -> tuple[dict, np.ndarray, list[dict]]:
    """Adapt on each target batch and record accuracy after every iteration 0..K.

    Iteration 0 is the unadapted model in eval mode, so ``iterations=0``
    reproduces plain evaluation exactly. Later iterations predict with the
    BN policy used for adaptation. Returns (metrics, curve, per-batch logs).
    """
    if cfg.attach_layer is not None and cfg.attach_layer != model.spec.attach_layer:
        raise ValueError(f"adapt attach_layer {cfg.attach_layer} != model attach_layer {model.spec.attach_layer}")
    predict_mode = "batch" if cfg.bn_policy == "batch" else "eval"
    model.restore(state)
    correct = np.zeros(cfg.iterations + 1)
    logs = []
    opt = None
    for b, idx in enumerate(_batches(len(target), cfg.batch_size, seed)):
        x, y = target.inputs[idx], target.labels[idx]
        if cfg.reset == "per_batch" or opt is None:
            if cfg.reset == "per_batch":
                model.restore(state)
            opt = make_optimizer(cfg.optimizer, model.adapt_params(), cfg.lr)
        logs.append({"batch": b, "size": int(idx.size), "state_before": model.state_digest(), "loss": []})
        correct[0] += np.sum(model.predict(x, "eval") == y)
        for k in range(1, cfg.iterations + 1):
            logs[-1]["loss"].append(model.adapt_step(x, opt, cfg.bn_policy))
            correct[k] += np.sum(model.predict(x, predict_mode) == y)
    if cfg.reset == "per_batch":
        model.restore(state)
    curve = correct / len(target)
    metrics = {
        "unadapted_accuracy": float(curve[0]),
        "adapted_accuracy": float(curve[-1]),
        "iterations": cfg.iterations,
        "accuracy_curve": [float(a) for a in curve],
    }
    return metrics, curve, logs


def ptbn_eval(model: NCTTTModel, state: ModelState, target: Dataset, batch_size: int, seed: int = 0) -> float:
    """Accuracy when every batch is classified with its own BatchNorm statistics."""
    model.restore(state)
    correct = 0
    for idx in _batches(len(target), batch_size, seed):
        correct += np.sum(model.ptbn_predict(target.inputs[idx]).argmax(axis=1) == target.labels[idx])
    return float(correct / len(target))


def evaluate(model: NCTTTModel, state: ModelState, source_test: Dataset, target: Dataset,
             adapt: AdaptConfig, seed: int = 0) -> dict:
    model.restore(state)
    return {
        "source_accuracy": accuracy(model, source_test),
        "target_accuracy": accuracy(model, target),
        "ptbn_accuracy": ptbn_eval(model, state, target, adapt.batch_size, seed),
    }


@dataclass
class RunResult:
    model: NCTTTModel
    state: ModelState
    train_record: RunRecord
    metrics: dict
    curve: np.ndarray


def run_experiment(cfg: ExperimentConfig, out_dir=None, iterations: int | None = None) -> RunResult:
    """Train (or load the cached checkpoint), evaluate, then adapt on the target set.

    ``metrics`` holds source/target/PTBN accuracies plus the adaptation
    curve; when ``out_dir`` is given the checkpoint and JSON files land in
    ``out_dir/run-<hash>``.
    """
    seed = cfg.train.seed
    adapt = cfg.adapt if iterations is None else replace(cfg.adapt, iterations=iterations)
    source, source_test, target = build_datasets(cfg.data, seed)
    run_dir = None
    if out_dir is not None:
        run_dir = run_directory(out_dir, cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
    model, state, record = load_or_train(cfg, source, run_dir)
    metrics = evaluate(model, state, source_test, target, adapt, seed)
    adapt_metrics, curve, logs = adapt_eval(model, state, target, adapt, seed)
    metrics.update(adapt_metrics)
    metrics["source_accuracy_after"] = accuracy(model, source_test)
    metrics["config_hash"] = cfg.full_hash()
    if run_dir is not None:
        adapt_dir = run_dir / f"adapt-{cfg.full_hash()[:12]}"
        adapt_dir.mkdir(exist_ok=True)
        write_json(adapt_dir / "metrics.json", metrics)
        rec = RunRecord(cfg.full_hash(), seed, record.epochs, logs, metrics, record.wall_time)
        write_json(adapt_dir / "runrecord.json", rec.to_dict())
        write_csv(adapt_dir / "accuracy_curve.csv", ["iteration", "accuracy"],
                  [(k, a) for k, a in enumerate(curve)])
    return RunResult(model, state, record, metrics, curve)


def run_eval(cfg: ExperimentConfig, out_dir=None) -> tuple[dict, Path | None]:
    """Unadapted and PTBN accuracies; written to ``run-<hash>/eval/metrics.json``."""
    seed = cfg.train.seed
    source, source_test, target = build_datasets(cfg.data, seed)
    run_dir = None
    if out_dir is not None:
        run_dir = run_directory(out_dir, cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
    model, state, _ = load_or_train(cfg, source, run_dir)
    metrics = evaluate(model, state, source_test, target, cfg.adapt, seed)
    metrics["config_hash"] = cfg.train_hash()
    if run_dir is not None:
        (run_dir / "eval").mkdir(exist_ok=True)
        write_json(run_dir / "eval" / "metrics.json", metrics)
    return metrics, run_dir


def run_directory(out_dir, cfg: ExperimentConfig) -> Path:
    return Path(out_dir) / f"run-{cfg.train_hash()[:12]}"


def load_or_train(cfg: ExperimentConfig, source: Dataset, run_dir: Path | None, force: bool = False):
    """Reuse ``run_dir/checkpoint.ncttt`` when present (unless ``force``), otherwise train and persist it."""
    ckpt = None if run_dir is None else run_dir / "checkpoint.ncttt"
    if ckpt is not None and ckpt.exists() and not force:
        model, meta = load_checkpoint(ckpt)
        if meta.get("config_hash") != cfg.train_hash():
            raise ValueError(f"checkpoint {ckpt} was trained from a different configuration")
        record = RunRecord(cfg.train_hash(), cfg.train.seed, metrics=meta.get("metrics", {}))
        return model, model.snapshot(), record
    model = NCTTTModel(cfg.model, stream_rng(cfg.train.seed, STREAM_INIT))
    state, record = train_source(model, source, cfg.train)
    record.config_hash = cfg.train_hash()
    if run_dir is not None:
        save_checkpoint(model, ckpt, {"config_hash": record.config_hash, "metrics": record.metrics})
        write_json(run_dir / "train_metrics.json", record.deterministic_dict())
        write_json(run_dir / "train_record.json", record.to_dict())
    return model, state, record


# -- sweeps ------------------------------------------------------------------------------------

def _sweep_cell(args) -> dict:
    base, layer, sigma_s, seed = args
    cfg = ExperimentConfig.from_dict(base)
    beta = cfg.train.noise.sigma_o / cfg.train.noise.sigma_s
    cfg.model = replace(cfg.model, attach_layer=layer)
    noise = NoiseConfig(sigma_s, beta * sigma_s, cfg.model.noise_dim, cfg.train.noise.M, cfg.model.noise_mode)
    cfg.train = replace(cfg.train, noise=noise, seed=seed)
    cfg.adapt = replace(cfg.adapt, attach_layer=layer)
    res = run_experiment(cfg)
    return {"attach_layer": layer, "sigma_s": sigma_s, "seed": seed,
            "source_accuracy": res.metrics["source_accuracy"],
            "target_accuracy": res.metrics["target_accuracy"],
            "adapted_accuracy": res.metrics["adapted_accuracy"]}


SWEEP_COLUMNS = ["attach_layer", "sigma_s", "sigma_o", "n_seeds", "seeds",
                 "source_accuracy_mean", "target_accuracy_mean",
                 "adapted_accuracy_mean", "adapted_accuracy_std", "adapted_accuracy_per_seed"]


def sweep(base: ExperimentConfig, layers, sigmas, seeds, jobs: int = 1) -> list[dict]:
    """Train and adapt every (attach layer, sigma_s, seed) cell; one summary row per grid cell."""
    layers, sigmas, seeds = list(layers), list(sigmas), list(seeds)
    if not layers or not sigmas or not seeds:
        raise ValueError("sweep grid must be nonempty in layers, sigmas and seeds")
    base_d = base.to_dict()
    tasks = [(base_d, layer, s, seed) for layer in layers for s in sigmas for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_sweep_cell, tasks))
    else:
        cells = [_sweep_cell(t) for t in tasks]
    beta = base.train.noise.sigma_o / base.train.noise.sigma_s
    rows = []
    for layer in layers:
        for s in sigmas:
            group = [c for c in cells if c["attach_layer"] == layer and c["sigma_s"] == s]
            adapted = np.array([c["adapted_accuracy"] for c in group])
            rows.append({
                "attach_layer": layer,
                "sigma_s": s,
                "sigma_o": beta * s,
                "n_seeds": len(group),
                "seeds": ";".join(str(c["seed"]) for c in group),
                "source_accuracy_mean": float(np.mean([c["source_accuracy"] for c in group])),
                "target_accuracy_mean": float(np.mean([c["target_accuracy"] for c in group])),
                "adapted_accuracy_mean": float(adapted.mean()),
                "adapted_accuracy_std": float(adapted.std()),
                "adapted_accuracy_per_seed": ";".join(repr(float(a)) for a in adapted),
            })
    return rows


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header] if isinstance(r, dict) else list(r))
    return buf.getvalue()


# -- figure data --------------------------------------------------------------------------------

def grid_points(extent: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-extent, extent, size)
    xx, yy = np.meshgrid(axis, axis)
    return axis, np.stack([xx.ravel(), yy.ravel()], axis=1)


def fixed_centers(n: int, seed: int, spread: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-spread, spread, size=(n, 2))


def posterior_grid(centers, sigma_s: float, sigma_o: float, extent: float = 1.5, size: int = 200) -> np.ndarray:
    """Rows (x, y, posterior) of the two-bandwidth KDE posterior on a square grid."""
    _, pts = grid_points(extent, size)
    post = nce.kde_posterior(pts, centers, sigma_s, sigma_o, 2)
    return np.column_stack([pts, post])


def in_domain_area(grid_rows: np.ndarray, extent: float, size: int) -> float:
    cell = (2.0 * extent / (size - 1)) ** 2
    return float(np.sum(grid_rows[:, 2] > 0.5) * cell)


def samples_probs(sigma_s: float, sigma_o: float, n: int = 500, seed: int = 0, dim: int = 2) -> np.ndarray:
    """Rows (eps_1, eps_2, is_in, probability) for noise vectors around the origin."""
    cfg = NoiseConfig(sigma_s, sigma_o, dim)
    eps, _, is_in = nce.sample_noise(n, cfg, np.random.default_rng(seed))
    prob = nce.labels_from_noise((eps ** 2).sum(axis=1), is_in, cfg)
    return np.column_stack([eps[:, 0], eps[:, 1] if dim > 1 else np.zeros(len(eps)), is_in.astype(float), prob])


def beta_curve(dim: int, beta_min: float = 1.0, beta_max: float = 3.0, step: float = 0.01,
               uncorrected: bool = False) -> np.ndarray:
    count = int(round((beta_max - beta_min) / step)) + 1
    betas = beta_min + step * np.arange(count)
    labels = [nce.expected_label(b, dim, uncorrected) if b > 1 else 0.5 for b in betas]
    return np.column_stack([betas, labels])


class ToyDiscriminator:
    """Linear-ReLU-Linear classifier over 2-D points, trained on noisy views of fixed centers."""

    def __init__(self, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = nn.ParamSet()
        self.l1 = nn.Linear(self.params, "disc.0", 2, hidden, rng)
        self.l2 = nn.Linear(self.params, "disc.1", hidden, 1, rng)

    def logits(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        return ops.reshape(self.l2(ops.relu(self.l1(z))), (z.shape[0],))

    def fit(self, centers: np.ndarray, cfg: NoiseConfig, steps: int = 1500, lr: float = 5e-3,
            seed: int = 0) -> ToyDiscriminator:
        opt = make_optimizer("adam", self.params.params(), lr)
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            views = nce.sample_noisy_views(centers, cfg, rng)
            loss = nce.aux_loss(self.logits(views.views), nce.soft_labels(views, cfg))
            backward(loss)
            opt.step()
        return self

    def log_q_and_grad(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """log q(z) and its gradient with respect to z, row by row."""
        z = Tensor(np.asarray(pts, dtype=np.float64), requires_grad=True)
        logq = ops.log_sigmoid(self.logits(z))
        backward(ops.sum(logq))
        grad = z.grad
        return logq.data, grad

    def ascend(self, start, step: float = 0.05, max_steps: int = 2000, tol: float = 1e-3) -> np.ndarray:
        """Gradient ascent on log q from ``start`` with step halving whenever q would drop.

        Stops when the gradient norm falls below ``tol`` or the step underflows.
        """
        path = [np.asarray(start, dtype=np.float64)]
        logq, g = self.log_q_and_grad(path[-1][None, :])
        for _ in range(max_steps):
            if np.linalg.norm(g) < tol or step < 1e-8:
                break
            cand = path[-1] + step * g[0]
            cand_logq, cand_g = self.log_q_and_grad(cand[None, :])
            if cand_logq[0] < logq[0]:
                step *= 0.5
                continue
            path.append(cand)
            logq, g = cand_logq, cand_g
        return np.array(path)


def gradient_field(centers, sigma_s: float = 0.05, sigma_o: float = 1.0, extent: float = 1.5, size: int = 25,
                   seed: int = 0, steps: int = 1500) -> np.ndarray:
    """Rows (x, y, q, dlogq/dx, dlogq/dy) of a discriminator trained around ``centers``."""
    disc = ToyDiscriminator(seed=seed).fit(np.asarray(centers, dtype=np.float64),
                                           NoiseConfig(sigma_s, sigma_o, 2, M=16), steps=steps, seed=seed)
    _, pts = grid_points(extent, size)
    logq, grad = disc.log_q_and_grad(pts)
    return np.column_stack([pts, np.exp(logq), grad])


def heatmap_svg(rows: np.ndarray, size: int, cell_px: int = 3) -> str:
    """Grayscale SVG of ``rows[:, 2]`` laid out as a ``size`` x ``size`` grid (value 1 is dark)."""
    vals = np.clip(rows[:, 2].reshape(size, size), 0.0, 1.0)
    px = size * cell_px
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" shape-rendering="crispEdges">']
    for r in range(size):
        y = (size - 1 - r) * cell_px  # first grid row is the lowest y
        for c in range(size):
            g = int(round(255 * (1.0 - vals[r, c])))
            parts.append(f'<rect x="{c * cell_px}" y="{y}" width="{cell_px}" height="{cell_px}" fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


FIGURE_HEADERS = {
    "posterior_grid": ["x", "y", "posterior"],
    "samples_probs": ["eps_x", "eps_y", "is_in", "probability"],
    "gradient_field": ["x", "y", "q", "grad_x", "grad_y"],
    "beta_curve": ["beta", "expected_label"],
    "accuracy_curve": ["iteration", "accuracy"],
}


def figure_rows(kind: str, params: dict) -> np.ndarray:
    p = dict(params)
    if kind == "posterior_grid":
        centers = np.asarray(p.get("centers", fixed_centers(p.get("n_centers", 20), p.get("seed", 0))))
        return posterior_grid(centers, p.get("sigma_s", 0.05), p.get("sigma_o", 1.0),
                              p.get("extent", 1.5), p.get("size", 200))
    if kind == "samples_probs":
        return samples_probs(p.get("sigma_s", 0.05), p.get("sigma_o", 1.0), p.get("n", 500), p.get("seed", 0))
    if kind == "gradient_field":
        centers = np.asarray(p.get("centers", fixed_centers(p.get("n_centers", 20), p.get("seed", 0))))
        return gradient_field(centers, p.get("sigma_s", 0.05), p.get("sigma_o", 1.0),
                              p.get("extent", 1.5), p.get("size", 25), p.get("seed", 0), p.get("steps", 1500))
    if kind == "beta_curve":
        return beta_curve(p.get("dim", 16), p.get("beta_min", 1.0), p.get("beta_max", 3.0),
                          p.get("step", 0.01), p.get("uncorrected", False))
    if kind == "accuracy_curve":
        curve = np.asarray(p["curve"], dtype=np.float64)
        return np.column_stack([np.arange(curve.size), curve])
    raise ValueError(f"unknown figure kind {kind!r}; expected one of {list(FIGURE_KINDS)}")


def emit_figure_data(kind: str, params: dict, out_dir, svg: bool = False) -> list[Path]:
    """Write ``<kind>.csv`` (and ``<kind>.svg`` for grid kinds when asked) into ``out_dir``."""
    if kind not in FIGURE_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}; expected one of {list(FIGURE_KINDS)}")
    rows = figure_rows(kind, params)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{kind}.csv"
    ints = {"iteration", "is_in"}
    header = FIGURE_HEADERS[kind]
    fmt = [(lambda v: str(int(v))) if h in ints else repr for h in header]
    write_csv(path, header, ([f(float(v)) for f, v in zip(fmt, r)] for r in rows))
    written = [path]
    if svg and kind in ("posterior_grid", "gradient_field"):
        size = int(math.isqrt(rows.shape[0]))
        svg_path = out_dir / f"{kind}.svg"
        svg_path.write_text(heatmap_svg(rows, size))
        written.append(svg_path)
    return written

