"""
Round protocol: sample-weighted aggregation, prompt affinity, auxiliary-decoder strategies,
client-side learnable aggregation and local training, plus the FedAvg, local and
centralized baselines.

The server is a sequential coordinator. Clients own their model instance and rng stream
and may run in a thread pool; the server waits for every upload before aggregating.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

import autodiff as ad
from autodiff import AdamW, no_grad, poly_lr
from config import ExperimentConfig
from errors import ProtocolError, ShapeError
from eval_metrics import metric_columns, score_predictions
from formats import UNLABELED, safe_json_dumps, write_json
from segmodel import ModelConfig, ParamPartition, SegModel, build_model, load_partition, partition, prompt_vectors
from segmodel import save_checkpoint
from synth_data import SiteSplit
from weak_labels import Sparsity
from wss_loss import LossConfig, full_supervision_objective, wss_objective

logger = logging.getLogger(__name__)

LA_TOLERANCE = 1e-3
LA_EARLY_ROUNDS = 2
LA_LATE_ITERS = 2
MAX_ROTATION = 45.0
RANDOM_STREAM = 7919


class Strategy(str, Enum):
    PSA = "psa"
    RANDOM = "random"
    FIXED_ORDER = "fixed_order"
    HPS = "hps"


# ---------------------------------------------------------------------------
# Server-side algebra
# ---------------------------------------------------------------------------


def aggregate_sample_weighted(parts: Sequence[Tuple[np.ndarray, int]]) -> np.ndarray:
    """Sum of |D_i| / sum |D_j| * v_i"""
    if not parts:
        raise ProtocolError("Cannot aggregate an empty list of client vectors")
    sizes = np.array([n for _, n in parts], dtype=np.float64)
    if (sizes < 1).any():
        raise ProtocolError(f"Client sample sizes must be >= 1, got {sizes.tolist()}")
    length = parts[0][0].size
    if any(v.size != length for v, _ in parts):
        raise ShapeError("Client vectors differ in length")
    weights = sizes / sizes.sum()
    out = weights[0] * parts[0][0].astype(np.float64)
    for w, (v, _) in zip(weights[1:], parts[1:]):
        out += w * v
    return out.astype(parts[0][0].dtype)


@dataclass
class AffinityMatrix:
    """ReLU-rectified cosine similarities between clients' concatenated prompts"""

    a: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def psa_weights(self) -> np.ndarray:
        return self.a / self.a.sum(axis=1, keepdims=True)

    def to_csv(self, path: Union[str, Path]) -> None:
        np.savetxt(path, self.a, delimiter=",", fmt="%.8f")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "AffinityMatrix":
        return cls(np.atleast_2d(np.loadtxt(path, delimiter=",")))


def compute_affinity(prompts: Sequence[Tuple[np.ndarray, np.ndarray]]) -> AffinityMatrix:
    """a_ij = max(0, cos(cat(p_U, p_D,i), cat(p_U, p_D,j)))"""
    vectors = [np.concatenate([np.ravel(pu), np.ravel(pd)]).astype(np.float64) for pu, pd in prompts]
    if len({v.size for v in vectors}) > 1:
        raise ShapeError("Client prompts differ in shape")
    mat = np.stack(vectors)
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0).any():
        raise ProtocolError(f"Zero-norm prompt vector for client(s) {np.nonzero(norms == 0)[0].tolist()}")
    unit = mat / norms[:, None]
    a = np.maximum(unit @ unit.T, 0.0)
    a = np.clip((a + a.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return AffinityMatrix(a)


def round_rng(seed: int, round_t: int) -> np.random.Generator:
    return np.random.default_rng([seed, RANDOM_STREAM, round_t])


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation without fixed points (identity when n == 1)"""
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


def aux_params_for_client(
    i: int,
    phis: Sequence[np.ndarray],
    affinity: Optional[AffinityMatrix],
    strategy: Strategy,
    rng: Optional[np.random.Generator] = None,
    round_t: int = 0,
) -> np.ndarray:
    """phi_bar_G,i for client ``i``; ``rng`` must be seeded identically for every client of a round"""
    strategy = Strategy(strategy)
    n = len(phis)
    if n == 0:
        raise ProtocolError("No client parameters to assign")
    if n == 1:
        return phis[0].copy()
    if strategy == Strategy.FIXED_ORDER:
        return phis[(i + 1) % n].copy()
    if strategy == Strategy.RANDOM:
        perm = random_derangement(n, rng if rng is not None else np.random.default_rng(round_t))
        return phis[int(perm[i])].copy()
    if affinity is None:
        raise ProtocolError(f"Strategy {strategy.value} needs an affinity matrix")
    row = affinity.a[i]
    if strategy == Strategy.HPS:
        others = np.where(np.arange(n) == i, -np.inf, row)
        j = int(np.argmax(others))
        return phis[j].copy() if others[j] > 0 else phis[i].copy()
    weights = row / row.sum()
    out = np.zeros_like(phis[0], dtype=np.float64)
    for w, phi in zip(weights, phis):
        out += w * phi
    return out.astype(phis[0].dtype)


# ---------------------------------------------------------------------------
# Learnable aggregation
# ---------------------------------------------------------------------------


def blend(phi_prev: np.ndarray, phi_global: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """phi_prev + (phi_global - phi_prev) * W, exact at W = 0 and W = 1"""
    mixed = phi_prev + (phi_global - phi_prev) * weights
    mixed = np.where(weights == 1.0, phi_global, mixed)
    return np.where(weights == 0.0, phi_prev, mixed).astype(phi_prev.dtype)


@dataclass
class LAResult:
    phi_hat: List[np.ndarray]
    weights: List[np.ndarray]
    iterations: int
    losses: List[float] = field(default_factory=list)


LossGradFn = Callable[[List[np.ndarray]], Tuple[float, List[np.ndarray]]]


def learnable_aggregation_pairs(
    phi_prev: Sequence[np.ndarray],
    phi_global: Sequence[np.ndarray],
    weights: Sequence[np.ndarray],
    loss_grad: LossGradFn,
    max_iters: int,
    lr: float,
    fixed_iters: Optional[int] = None,
    tol: float = LA_TOLERANCE,
) -> LAResult:
    """Element-wise blending weights learned by plain gradient steps, clamped to [0, 1]

    ``loss_grad`` maps the blended vectors to (loss, d loss / d blended). Without
    ``fixed_iters`` the loop stops when the relative loss change drops below ``tol``.
    """
    weights = [np.clip(w, 0.0, 1.0).astype(np.float32) for w in weights]
    deltas = [(g - p).astype(np.float32) for p, g in zip(phi_prev, phi_global)]
    budget = fixed_iters if fixed_iters is not None else max_iters
    losses: List[float] = []
    iterations = 0
    for _ in range(budget):
        blended = [blend(p, g, w) for p, g, w in zip(phi_prev, phi_global, weights)]
        loss, grads = loss_grad(blended)
        weights = [np.clip(w - lr * d * gr, 0.0, 1.0).astype(np.float32) for w, d, gr in zip(weights, deltas, grads)]
        iterations += 1
        if fixed_iters is None and losses:
            previous = losses[-1]
            if abs(loss - previous) / max(abs(previous), 1e-12) < tol:
                losses.append(loss)
                break
        losses.append(loss)
    phi_hat = [blend(p, g, w) for p, g, w in zip(phi_prev, phi_global, weights)]
    return LAResult(phi_hat, weights, iterations, losses)


def learnable_aggregation(
    phi_prev: np.ndarray,
    phi_global: np.ndarray,
    weights: np.ndarray,
    loss_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    max_iters: int,
    lr: float,
    fixed_iters: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Single-pair form: returns (phi_hat, W)"""

    def _pair_fn(blended):
        loss, grad = loss_grad(blended[0])
        return loss, [grad]

    result = learnable_aggregation_pairs([phi_prev], [phi_global], [weights], _pair_fn, max_iters, lr, fixed_iters)
    return result.phi_hat[0], result.weights[0]


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


def augment_batch(
    images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, fill: int = UNLABELED
) -> Tuple[np.ndarray, np.ndarray]:
    """Random flips and a rotation in [-45, 45] degrees per sample; labels use nearest sampling"""
    images, labels = images.copy(), labels.copy()
    for k in range(len(images)):
        if rng.random() < 0.5:
            images[k], labels[k] = images[k][..., ::-1], labels[k][..., ::-1]
        if rng.random() < 0.5:
            images[k], labels[k] = images[k][..., ::-1, :], labels[k][..., ::-1, :]
        angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
        images[k, 0] = ndimage.rotate(images[k, 0], angle, reshape=False, order=1, mode="nearest")
        labels[k] = ndimage.rotate(labels[k], angle, reshape=False, order=0, mode="constant", cval=fill)
    return images, labels


@dataclass
class ClientUpload:
    """What a client sends to the server after its local round"""

    client_id: int
    theta: np.ndarray
    phi: np.ndarray
    num_samples: int
    loss: float
    la_iterations: int = 0

    def payload_bytes(self) -> Dict[str, int]:
        return {"theta": self.theta.nbytes, "phi": self.phi.nbytes}


@dataclass
class ClientState:
    client_id: int
    train: SiteSplit
    model: SegModel
    params: ParamPartition
    rng: np.random.Generator
    supervision: str = "weak"
    w_main: Optional[np.ndarray] = None
    w_aux: Optional[np.ndarray] = None

    @property
    def num_samples(self) -> int:
        return len(self.train)

    @property
    def sparsity(self) -> Sparsity:
        return self.train.sparsity

    def ensure_weights(self) -> None:
        if self.w_main is None:
            self.w_main = np.ones_like(self.params.phi)
            self.w_aux = np.ones_like(self.params.phi_bar)

    def sample_batch(self, batch: int, augment: bool) -> Tuple[np.ndarray, np.ndarray]:
        n = self.num_samples
        idx = self.rng.choice(n, size=min(batch, n), replace=False)
        targets = self.train.masks if self.supervision == "full" else self.train.weak
        images, labels = self.train.images[idx], targets[idx]
        if augment:
            fill = 0 if self.supervision == "full" else UNLABELED
            images, labels = augment_batch(images, labels, self.rng, fill)
        return images, labels


def _objective(client: ClientState, images: np.ndarray, labels: np.ndarray, loss_cfg: LossConfig):
    p_main, p_aux = client.model.forward(images, client.client_id, client.sparsity)
    if client.supervision == "full":
        return full_supervision_objective(p_main, labels, loss_cfg)
    return wss_objective(p_main, p_aux, labels, loss_cfg, client.rng)


def _loss_and_grads(client: ClientState, images, labels, loss_cfg: LossConfig, groups: Sequence[str]):
    client.model.zero_grad()
    out = _objective(client, images, labels, loss_cfg)
    ad.backward(out.total)
    return out.item(), [client.model.flat_grad(g) for g in groups]


def client_local_round(
    client: ClientState,
    theta_g: np.ndarray,
    phi_g: np.ndarray,
    phi_bar_g: Optional[np.ndarray],
    cfg: ExperimentConfig,
    round_t: int,
    lr: float,
) -> ClientUpload:
    """Receive, blend decoders, train ``cfg.local_iters`` AdamW steps, upload (theta_i, phi_i)"""
    model = client.model
    loss_cfg = LossConfig(lam=cfg.lam)
    dual = model.aux_decoder is not None
    phi_bar_g = phi_bar_g if phi_bar_g is not None else client.params.phi_bar
    model.train()
    la_iterations = 0

    # phi_prev equals phi_G in the first round, so blending starts from round 2.
    if cfg.la_on and round_t > 1:
        client.ensure_weights()
        images, labels = client.sample_batch(cfg.batch, augment=False)
        prev = [client.params.phi] + ([client.params.phi_bar] if dual else [])
        glob = [phi_g] + ([phi_bar_g] if dual else [])
        weights = [client.w_main] + ([client.w_aux] if dual else [])
        groups = ("phi", "phi_bar")[: len(prev)]

        def _loss_grad(blended):
            phi_bar = blended[1] if dual else client.params.phi_bar
            load_partition(model, ParamPartition(theta_g, blended[0], phi_bar))
            return _loss_and_grads(client, images, labels, loss_cfg, groups)

        fixed = None if round_t <= LA_EARLY_ROUNDS else LA_LATE_ITERS
        result = learnable_aggregation_pairs(prev, glob, weights, _loss_grad, cfg.la_max_iters, lr, fixed)
        phi_hat = result.phi_hat[0]
        phi_bar_hat = result.phi_hat[1] if dual else client.params.phi_bar
        client.w_main = result.weights[0]
        if dual:
            client.w_aux = result.weights[1]
        la_iterations = result.iterations
    else:
        phi_hat, phi_bar_hat = phi_g, phi_bar_g

    load_partition(model, ParamPartition(theta_g, phi_hat, phi_bar_hat))
    skip = model.no_decay_ids()
    optimizer = AdamW(model.parameters(), lr=lr, weight_decay=cfg.weight_decay, no_decay=lambda p: id(p) in skip)
    losses = []
    for _ in range(cfg.local_iters):
        images, labels = client.sample_batch(cfg.batch, cfg.augment)
        optimizer.zero_grad()
        out = _objective(client, images, labels, loss_cfg)
        ad.backward(out.total)
        optimizer.step(lr)
        losses.append(out.item())

    client.params = partition(model)
    return ClientUpload(
        client_id=client.client_id,
        theta=client.params.theta.copy(),
        phi=client.params.phi.copy(),
        num_samples=client.num_samples,
        loss=float(np.mean(losses)) if losses else float("nan"),
        la_iterations=la_iterations,
    )


def predict(model: SegModel, images: np.ndarray, client_id: int, sparsity: Sparsity, batch: int = 16) -> np.ndarray:
    """Argmax class maps of the main decoder (lowest class wins ties)"""
    model.eval()
    maps = []
    with no_grad():
        for start in range(0, len(images), batch):
            p_main, _ = model.forward(images[start : start + batch], client_id, sparsity)
            maps.append(p_main.data.argmax(axis=1).astype(np.uint8))
    model.train()
    return np.concatenate(maps) if maps else np.zeros((0,) + images.shape[2:], dtype=np.uint8)


def evaluate_split(model: SegModel, split: SiteSplit, client_id: int, num_classes: int) -> Dict[str, float]:
    preds = predict(model, split.images, client_id, split.sparsity)
    return score_predictions(list(preds), list(split.masks), num_classes)


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


class RunRecorder:
    """metrics.csv, messages.jsonl and affinity_round_<t>.csv inside one run directory"""

    def __init__(self, run_dir: Optional[Path], num_classes: int):
        self.run_dir = Path(run_dir) if run_dir else None
        self.columns = ["round", "site"] + metric_columns(num_classes) + ["loss"]
        self.rows: List[Dict] = []
        self.bytes_up = 0
        self.bytes_down = 0
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with open(self.run_dir / "metrics.csv", "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)
            (self.run_dir / "messages.jsonl").write_text("")

    def metrics(self, round_t: int, site: int, scores: Dict[str, float], loss: float) -> None:
        row = {"round": round_t, "site": site, "loss": loss}
        row.update({k: scores[k] for k in self.columns[2:-1]})
        self.rows.append(row)
        if self.run_dir:
            with open(self.run_dir / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])

    def message(self, round_t: int, direction: str, client: int, sizes: Dict[str, int]) -> None:
        total = sum(sizes.values())
        if direction == "upload":
            self.bytes_up += total
        else:
            self.bytes_down += total
        if self.run_dir:
            record = {"round": round_t, "direction": direction, "client": client, "bytes": sizes, "total": total}
            with open(self.run_dir / "messages.jsonl", "a") as fh:
                fh.write(safe_json_dumps(record, indent=None) + "\n")

    def affinity(self, round_t: int, affinity: AffinityMatrix) -> None:
        if self.run_dir:
            affinity.to_csv(self.run_dir / f"affinity_round_{round_t}.csv")

    def communication(self) -> Dict[str, int]:
        return {"upload_bytes": self.bytes_up, "download_bytes": self.bytes_down}


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


@dataclass
class FederationResult:
    rows: List[Dict]
    clients: List[ParamPartition]
    global_params: Optional[ParamPartition]
    affinity: Optional[AffinityMatrix]
    communication: Dict[str, int]


# ---------------------------------------------------------------------------
# Server loop
# ---------------------------------------------------------------------------


def model_config_for(cfg: ExperimentConfig, num_clients: int, image_size: Tuple[int, int]) -> ModelConfig:
    eff = cfg.effective()
    return ModelConfig(
        channels_base=cfg.channels_base,
        depth=cfg.depth,
        num_clients=num_clients,
        image_size=tuple(image_size),
        seed=cfg.seed,
        tdf_on=eff.tdf_on,
        dual_decoder=eff.pd_on,
        ukp_on=eff.ukp_on,
        asp_on=eff.asp_on,
        fusion=eff.fusion,
    )


def _run_clients(clients, jobs, workers: int, round_t: int) -> List[ClientUpload]:
    def _safe(job):
        client, args = job
        try:
            return client_local_round(client, *args)
        except Exception as e:
            logger.error(f"Client {client.client_id} failed in round {round_t}: {e}")
            raise ProtocolError(f"Client {client.client_id} failed in round {round_t}: {e}") from e

    pairs = list(zip(clients, jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_safe, pairs))
    return [_safe(p) for p in pairs]


def run_federation(
    cfg: ExperimentConfig,
    train: Sequence[SiteSplit],
    test: Sequence[SiteSplit],
    run_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> FederationResult:
    """Federated training for the fedlppa, fedavg and local methods"""
    cfg = cfg.validate()
    n = len(train)
    if n < 1:
        raise ProtocolError("A federation needs at least one client")
    if cfg.method not in ("fedlppa", "fedavg", "local"):
        raise ProtocolError(f"run_federation() does not run method {cfg.method!r}")
    eff = cfg.effective()
    model_cfg = model_config_for(cfg, n, train[0].spec.image_size)
    clients = []
    for k, split in enumerate(train):
        if len(split) == 0:
            raise ProtocolError(f"Client {k} has an empty training set")
        model = build_model(model_cfg)
        clients.append(ClientState(k, split, model, partition(model), np.random.default_rng([cfg.seed, k])))
    init = clients[0].params
    theta_g, phi_g = init.theta.copy(), init.phi.copy()
    phi_bar_g = [c.params.phi_bar.copy() for c in clients]
    recorder = RunRecorder(Path(run_dir) if run_dir else None, model_cfg.num_classes)
    affinity = None
    strategy = Strategy(cfg.strategy)
    sizes = {"theta": theta_g.nbytes, "phi": phi_g.nbytes, "phi_bar": phi_bar_g[0].nbytes}
    logger.info(
        f"Starting {cfg.method} with {n} clients for {cfg.rounds} rounds "
        f"(tdf={eff.tdf_on}, pd={eff.pd_on}, la={eff.la_on}, strategy={strategy.value})"
    )

    for t in tqdm(range(1, cfg.rounds + 1), desc=cfg.method, disable=not progress):
        lr = poly_lr(cfg.base_lr, t - 1, cfg.rounds)
        jobs = []
        for c in clients:
            if cfg.method == "local":
                received = (c.params.theta, c.params.phi, c.params.phi_bar)
            else:
                received = (theta_g, phi_g, phi_bar_g[c.client_id] if eff.pd_on else None)
                down = {"theta": sizes["theta"], "phi": sizes["phi"]}
                if eff.pd_on:
                    down["phi_bar"] = sizes["phi_bar"]
                recorder.message(t, "download", c.client_id, down)
            jobs.append(received + (eff, t, lr))
        uploads = _run_clients(clients, jobs, cfg.workers, t)

        if cfg.method != "local":
            for up in uploads:
                recorder.message(t, "upload", up.client_id, up.payload_bytes())
            theta_g = aggregate_sample_weighted([(u.theta, u.num_samples) for u in uploads])
            phi_g = aggregate_sample_weighted([(u.phi, u.num_samples) for u in uploads])
            if eff.tdf_on:
                model = clients[0].model
                p_u, _ = prompt_vectors(model, theta_g, 0)
                affinity = compute_affinity([(p_u, prompt_vectors(model, u.theta, u.client_id)[1]) for u in uploads])
                recorder.affinity(t, affinity)
            if eff.pd_on:
                aux_layout = [clients[0].model.main_to_aux(u.phi) for u in uploads]
                phi_bar_g = [
                    aux_params_for_client(i, aux_layout, affinity, strategy, round_rng(cfg.seed, t), t)
                    for i in range(n)
                ]

        if t % cfg.eval_every == 0 or t == cfg.rounds:
            for c, up in zip(clients, uploads):
                model = c.model
                if cfg.method == "fedavg":
                    load_partition(model, ParamPartition(theta_g, phi_g, c.params.phi_bar))
                scores = evaluate_split(model, test[c.client_id], c.client_id, model_cfg.num_classes)
                recorder.metrics(t, c.client_id, scores, up.loss)
                logger.info(f"Round {t} site {c.client_id}: dsc={scores['dsc']:.4f} hd95={scores['hd95']:.2f}")

    global_params = None
    if cfg.method == "fedavg":
        global_params = ParamPartition(theta_g, phi_g, clients[0].params.phi_bar)
    if run_dir:
        _save_models(Path(run_dir), clients, global_params)
    return FederationResult(
        rows=recorder.rows,
        clients=[c.params for c in clients],
        global_params=global_params,
        affinity=affinity,
        communication=recorder.communication(),
    )


def _save_models(run_dir: Path, clients: Sequence[ClientState], global_params: Optional[ParamPartition]) -> None:
    for c in clients:
        save_checkpoint(run_dir / "checkpoints" / f"site_{c.client_id}", c.model, c.params)
    if global_params is not None:
        save_checkpoint(run_dir / "checkpoints" / "global", clients[0].model, global_params)


def fedavg_baseline(
    cfg: ExperimentConfig, train: Sequence[SiteSplit], test: Sequence[SiteSplit], run_dir=None, progress=False
) -> FederationResult:
    """Whole-model sample-weighted averaging of one shared single-decoder U-Net"""
    return run_federation(replace(cfg, method="fedavg"), train, test, run_dir, progress)


def local_baseline(
    cfg: ExperimentConfig, train: Sequence[SiteSplit], test: Sequence[SiteSplit], run_dir=None, progress=False
) -> FederationResult:
    """Every site trains alone; nothing is exchanged"""
    return run_federation(replace(cfg, method="local"), train, test, run_dir, progress)


def pooled_split(splits: Sequence[SiteSplit]) -> SiteSplit:
    return SiteSplit(
        spec=splits[0].spec,
        images=np.concatenate([s.images for s in splits]),
        masks=np.concatenate([s.masks for s in splits]),
        weak=np.concatenate([s.weak for s in splits]),
    )


def centralized_baseline(
    cfg: ExperimentConfig,
    train: Sequence[SiteSplit],
    test: Sequence[SiteSplit],
    run_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> FederationResult:
    """One model on the pooled data of every site, weak labels or full masks"""
    cfg = cfg.validate()
    if cfg.method not in ("centralized_weak", "centralized_full"):
        cfg = replace(cfg, method="centralized_weak")
    n = len(train)
    model_cfg = model_config_for(cfg, 1, train[0].spec.image_size)
    model = build_model(model_cfg)
    supervision = "full" if cfg.method == "centralized_full" else "weak"
    trainer = ClientState(0, pooled_split(train), model, partition(model), np.random.default_rng([cfg.seed, 0]))
    trainer.supervision = supervision
    recorder = RunRecorder(Path(run_dir) if run_dir else None, model_cfg.num_classes)
    iters_cfg = replace(cfg, local_iters=cfg.local_iters * n, la_on=False)
    logger.info(f"Starting {cfg.method} on {len(trainer.train)} pooled samples for {cfg.rounds} rounds")
    for t in tqdm(range(1, cfg.rounds + 1), desc=cfg.method, disable=not progress):
        lr = poly_lr(cfg.base_lr, t - 1, cfg.rounds)
        p = trainer.params
        up = client_local_round(trainer, p.theta, p.phi, p.phi_bar, iters_cfg, t, lr)
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            for k, split in enumerate(test):
                scores = evaluate_split(model, split, 0, model_cfg.num_classes)
                recorder.metrics(t, k, scores, up.loss)
    if run_dir:
        for k in range(n):
            save_checkpoint(Path(run_dir) / "checkpoints" / f"site_{k}", model, trainer.params)
        save_checkpoint(Path(run_dir) / "checkpoints" / "global", model, trainer.params)
    return FederationResult(recorder.rows, [trainer.params] * n, trainer.params, None, recorder.communication())


def run_method(
    cfg: ExperimentConfig,
    train: Sequence[SiteSplit],
    test: Sequence[SiteSplit],
    run_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> FederationResult:
    if cfg.method.startswith("centralized"):
        result = centralized_baseline(cfg, train, test, run_dir, progress)
    else:
        result = run_federation(cfg, train, test, run_dir, progress)
    if run_dir:
        write_json(Path(run_dir) / "communication.json", result.communication)
    return result
