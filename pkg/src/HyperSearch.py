import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist
from scipy.stats import norm
from tqdm import tqdm

from src.Errors import AllTrialsFailed, SynthesisError
from src.Models import ArchitectureConfig, width_bounds

logger = logging.getLogger(__name__)

Params = Dict[str, Any]

BATCH_SIZES = (2, 4, 8, 16, 32, 64, 128)


@dataclass
class Dimension:
    # One searchable hyperparameter mapped onto [0, 1].
    name: str
    kind: str
    low: float = 0.0
    high: float = 1.0
    choices: Tuple[Any, ...] = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "loguniform", "integer", "categorical"):
            raise ValueError(f"Unknown dimension kind: {self.kind}")
        if self.kind == "categorical":
            if not self.choices:
                raise ValueError(f"{self.name}: categorical dimension without choices")
            self.choices = tuple(self.choices)
        elif self.high < self.low:
            raise ValueError(f"{self.name}: high < low")
        if self.kind == "loguniform" and self.low <= 0:
            raise ValueError(f"{self.name}: log-uniform bounds must be positive")

    def from_unit(self, u: float) -> Any:
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == "uniform":
            return float(self.low + u * (self.high - self.low))
        if self.kind == "loguniform":
            value = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
            return float(min(max(value, self.low), self.high))
        if self.kind == "integer":
            return int(min(self.low + math.floor(u * (self.high - self.low + 1)), self.high))
        return self.choices[min(int(u * len(self.choices)), len(self.choices) - 1)]

    def to_unit(self, value: Any) -> float:
        if self.kind == "uniform":
            span = self.high - self.low
            return 0.5 if span == 0 else (value - self.low) / span
        if self.kind == "loguniform":
            span = math.log(self.high) - math.log(self.low)
            return 0.5 if span == 0 else (math.log(value) - math.log(self.low)) / span
        if self.kind == "integer":
            return (value - self.low + 0.5) / (self.high - self.low + 1)
        return (self.choices.index(value) + 0.5) / len(self.choices)

    def contains(self, value: Any) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if self.kind == "integer" and int(value) != value:
            return False
        return self.low <= value <= self.high


@dataclass
class HyperParamSpace:
    dimensions: List[Dimension]

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.dimensions]

    def sample(self, rng: np.random.Generator) -> Params:
        return self.from_unit(rng.random(len(self.dimensions)))

    def from_unit(self, point: Sequence[float]) -> Params:
        return {d.name: d.from_unit(u) for d, u in zip(self.dimensions, point)}

    def to_unit(self, params: Params) -> np.ndarray:
        return np.array([d.to_unit(params[d.name]) for d in self.dimensions])

    def contains(self, params: Params) -> bool:
        return all(d.contains(params[d.name]) for d in self.dimensions)

    @classmethod
    def default(cls, depth: int = 0, eeg_shape: Optional[Tuple[int, ...]] = None,
                latent: int = 8, contrastive: bool = True) -> "HyperParamSpace":
        # Training ranges, plus per-layer widths for `depth` layers when eeg_shape is given.
        # theta is searched only for procedures with a contrastive encoder objective.
        dims = [Dimension("learning_rate", "loguniform", 1e-14, 1e-3),
                Dimension("l1_eeg", "loguniform", 1e-5, 1e-1),
                Dimension("l1_fmri", "loguniform", 1e-5, 1e-1),
                Dimension("l1_dec", "loguniform", 1e-5, 1e-1)]
        if contrastive:
            dims.append(Dimension("theta", "uniform", 0.0, 1.0))
        dims.append(Dimension("batch_size", "categorical", choices=BATCH_SIZES))
        if eeg_shape is not None:
            for component, (low, high, _) in width_bounds(eeg_shape, latent).items():
                dims += [Dimension(f"{component}_width_{i}", "integer", low, high) for i in range(depth)]
        return cls(dims)


def architecture_from(params: Params, depth: int, eeg_shape: Tuple[int, ...],
                      base: ArchitectureConfig) -> ArchitectureConfig:
    # Sorts sampled widths so each component changes monotonically between its bounds.
    bounds = width_bounds(eeg_shape, base.latent_features)
    widths = {}
    for component, (_, _, increasing) in bounds.items():
        values = [int(params[f"{component}_width_{i}"]) for i in range(depth)
                  if f"{component}_width_{i}" in params]
        widths[component] = sorted(values, reverse=not increasing) if len(values) == depth else None
    data = asdict(base)
    data.update(depth=depth, eeg_widths=widths["eeg"], fmri_widths=widths["fmri"],
                decoder_widths=widths["decoder"])
    return ArchitectureConfig(**data)


@dataclass
class TrialResult:
    params: Params
    depth: int
    score: Optional[float]
    seed: int
    wall_time: float = 0.0
    status: str = "ok"
    index: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


class TrialLog:
    # Append-only JSON-lines record of every trial; used to resume a search.

    def __init__(self, path: str):
        self.path = path

    def records(self) -> List[Dict[str, Any]]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]

    def append(self, trial: TrialResult):
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(trial.to_record(), sort_keys=True) + "\n")

    def replay(self, depth: int, seed: int, index: int, params: Params) -> Optional[TrialResult]:
        for record in self.records():
            if (record["depth"], record["seed"], record["index"]) == (depth, seed, index) \
                    and record["params"] == json.loads(json.dumps(params)):
                return TrialResult(**record)
        return None


class GaussianProcess:
    # GP regression with a Matérn-5/2 kernel on unit-cube inputs. The lengthscale
    # is picked from a grid by marginal likelihood.

    def __init__(self, lengthscales: Sequence[float] = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6),
                 noise: float = 1e-6):
        self.lengthscales = tuple(lengthscales)
        self.noise = noise

    @staticmethod
    def kernel(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
        r = np.sqrt(5.0) * cdist(a, b) / lengthscale
        return (1.0 + r + r * r / 3.0) * np.exp(-r)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = y.mean()
        spread = y.std()
        self.y_scale = spread if spread > 0 else 1.0
        target = (y - self.y_mean) / self.y_scale

        best = None
        for lengthscale in self.lengthscales:
            k = self.kernel(self.x, self.x, lengthscale) + self.noise * np.eye(len(self.x))
            try:
                factor = cho_factor(k, lower=True)
            except np.linalg.LinAlgError:
                continue
            alpha = cho_solve(factor, target)
            evidence = -0.5 * target @ alpha - np.log(np.diag(factor[0])).sum()
            if best is None or evidence > best[0]:
                best = (evidence, lengthscale, factor, alpha)
        if best is None:
            raise np.linalg.LinAlgError("kernel matrix is not positive definite for any lengthscale")
        _, self.lengthscale, self.factor, self.alpha = best
        return self

    def predict(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k_star = self.kernel(np.asarray(x, dtype=np.float64), self.x, self.lengthscale)
        mean = k_star @ self.alpha
        v = cho_solve(self.factor, k_star.T)
        variance = np.maximum(1.0 - np.sum(k_star * v.T, axis=1), 0.0)
        return mean * self.y_scale + self.y_mean, np.sqrt(variance) * self.y_scale


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float, xi: float = 0.0) -> np.ndarray:
    # Minimization convention.
    improvement = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = improvement / std
        ei = improvement * norm.cdf(z) + std * norm.pdf(z)
    return np.where(std > 0, ei, 0.0)


def _run_trial(objective: Callable[[Params], float], params: Params, depth: int,
               seed: int, index: int) -> TrialResult:
    start = time.perf_counter()
    try:
        score = float(objective(params))
        status = "ok" if np.isfinite(score) else "failed"
    except (SynthesisError, ArithmeticError, ValueError) as exc:
        logger.warning("trial %d at depth %d failed: %s", index, depth, exc)
        score, status = None, "failed"
    if status == "failed":
        score = None
    return TrialResult(params, depth, score, seed, time.perf_counter() - start, status, index)


class BayesianSearch:
    # One BO run: seeded random warm-up, then GP + expected improvement.

    def __init__(self, space: HyperParamSpace, objective: Callable[[Params], float], n_iter: int,
                 rng_seed: int = 0, depth: int = 1, workers: int = 1, log: Optional[TrialLog] = None,
                 n_candidates: int = 512, progress: bool = False):
        if n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        self.space = space
        self.objective = objective
        self.n_iter = n_iter
        self.seed = rng_seed
        self.depth = depth
        self.workers = workers
        self.log = log
        self.n_candidates = n_candidates
        self.progress = progress
        self.rng = np.random.default_rng(rng_seed)
        self.trials: List[TrialResult] = []

    @property
    def warmup(self) -> int:
        return math.ceil(self.n_iter / 5)

    def _evaluate(self, batch: List[Tuple[int, Params]]) -> List[TrialResult]:
        results: Dict[int, TrialResult] = {}
        pending = []
        for index, params in batch:
            replayed = self.log.replay(self.depth, self.seed, index, params) if self.log else None
            if replayed is not None:
                logger.info("trial %d at depth %d replayed from log", index, self.depth)
                results[index] = replayed
            else:
                pending.append((index, params))
        run = lambda item: _run_trial(self.objective, item[1], self.depth, self.seed, item[0])
        if self.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                fresh = list(pool.map(run, pending))
        else:
            fresh = [run(item) for item in pending]
        for trial in fresh:
            results[trial.index] = trial
            if self.log:
                self.log.append(trial)
        ordered = [results[index] for index, _ in batch]
        for trial in ordered:
            logger.info("depth %d trial %d: %s score=%s", self.depth, trial.index, trial.status, trial.score)
        return ordered

    def _observations(self) -> Tuple[np.ndarray, np.ndarray]:
        scores = [t.score for t in self.trials if t.ok]
        worst = max(scores)
        x = np.array([self.space.to_unit(t.params) for t in self.trials])
        y = np.array([t.score if t.ok else worst for t in self.trials])
        return x, y

    def _propose(self) -> Params:
        if sum(1 for t in self.trials if t.ok) < 2:
            return self.space.sample(self.rng)
        x, y = self._observations()
        gp = GaussianProcess().fit(x, y)
        dims = len(self.space.dimensions)
        incumbent = x[int(np.argmin(y))]
        candidates = np.vstack([
            self.rng.random((self.n_candidates, dims)),
            np.clip(incumbent + 0.05 * self.rng.standard_normal((64, dims)), 0.0, 1.0)])
        mean, std = gp.predict(candidates)
        ei = expected_improvement(mean, std, float(y.min()))
        return self.space.from_unit(candidates[int(np.argmax(ei))])

    def run(self) -> TrialResult:
        warm = [(i, self.space.sample(self.rng)) for i in range(self.warmup)]
        self.trials.extend(self._evaluate(warm))
        for index in tqdm(range(self.warmup, self.n_iter), desc=f"BO depth {self.depth}",
                          disable=not self.progress):
            self.trials.extend(self._evaluate([(index, self._propose())]))
        return self.best()

    def best(self) -> TrialResult:
        ok = [t for t in self.trials if t.ok]
        if not ok:
            raise AllTrialsFailed(f"all {len(self.trials)} trials at depth {self.depth} failed")
        return min(ok, key=lambda t: (t.score, t.index))


def bo_optimize(space: HyperParamSpace, objective: Callable[[Params], float], n_iter: int,
                rng_seed: int = 0, depth: int = 1, workers: int = 1,
                log: Optional[TrialLog] = None, progress: bool = False) -> TrialResult:
    return BayesianSearch(space, objective, n_iter, rng_seed, depth, workers, log,
                          progress=progress).run()


@dataclass
class NASResult:
    depth: int
    best: TrialResult
    cap_reached: bool = False
    per_depth: List[TrialResult] = field(default_factory=list)


def improved(new: float, old: float, tolerance: float = 1e-6) -> bool:
    return new <= old - tolerance * max(abs(old), 1e-12)


def nas_depth_search(space: Union[HyperParamSpace, Callable[[int], HyperParamSpace]],
                     build_and_eval: Callable[[int, Params], float], n_iter_per_depth: int = 100,
                     rng_seed: int = 0, max_depth: int = 8, tolerance: float = 1e-6,
                     workers: int = 1, log: Optional[TrialLog] = None,
                     progress: bool = False) -> NASResult:
    # Grows depth until the best score stops improving; returns the previous depth.
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    per_depth: List[TrialResult] = []
    previous: Optional[TrialResult] = None
    for depth in range(1, max_depth + 1):
        depth_space = space(depth) if callable(space) else space
        best = bo_optimize(depth_space, lambda params, d=depth: build_and_eval(d, params),
                           n_iter_per_depth, rng_seed + depth, depth, workers, log, progress)
        per_depth.append(best)
        logger.info("depth %d best score %.6g", depth, best.score)
        if previous is not None and not improved(best.score, previous.score, tolerance):
            logger.info("no improvement at depth %d; keeping depth %d", depth, previous.depth)
            return NASResult(previous.depth, previous, False, per_depth)
        previous = best
    logger.warning("depth cap %d reached while still improving", max_depth)
    return NASResult(previous.depth, previous, True, per_depth)
