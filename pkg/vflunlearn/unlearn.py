"""Client-level unlearning by constrained gradient ascent."""

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from vflunlearn.data import ClientDataset, Party, VerticalBatch
from vflunlearn.exceptions import ArgumentError, NumericError
from vflunlearn.logger import Logger
from vflunlearn.numcore import ParamVector, ascent_step, l2_distance, project_to_ball
from vflunlearn.protocol import (
    Evaluator,
    FedAvgResult,
    SplitModel,
    TrainConfig,
    split_backward,
    split_forward,
    train_fedavg,
)
from vflunlearn.utils import derive_seed

RadiusSpec = Union[float, str]

_RELATIVE_RADIUS = re.compile(
    r"^\s*(?:(?P<mul>\d+(?:\.\d*)?)\s*\*\s*)?dist\s*(?:/\s*(?P<div>\d+(?:\.\d*)?))?\s*$",
    re.IGNORECASE,
)


def dist_multiplier(radius: str) -> float:
    """Parse ``"Dist"``, ``"Dist/k"`` or ``"k*Dist"`` into the factor applied to Dist."""
    match = _RELATIVE_RADIUS.match(radius)
    if not match:
        raise ArgumentError(f"cannot parse radius {radius!r}; use a number, 'Dist/k' or 'k*Dist'")
    factor = float(match.group("mul") or 1.0)
    if match.group("div"):
        factor /= float(match.group("div"))
    return factor


def resolve_radius(radius: RadiusSpec, dist: Optional[float] = None) -> float:
    """Turn an absolute or Dist-relative radius into a positive number."""
    if isinstance(radius, str):
        if dist is None:
            raise ArgumentError(f"radius {radius!r} needs a calibrated Dist")
        value = dist_multiplier(radius) * dist
    else:
        value = float(radius)
    if not value > 0:
        raise ArgumentError("radius must be positive")
    return value


class UnlearnConfig(BaseModel):
    """Unlearning hyper-parameters.

    ``threshold`` is the early-stop threshold T on the drift
    ``||W - W_target_prev||``. With ``stop_rule="reach"`` ascent stops once the
    drift reaches T; ``"below"`` stops while the drift is still under T.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    target_client: int = Field(1, ge=1)
    selected_party: Party = "B"
    lr: float = Field(0.01, ge=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    radius: RadiusSpec = "Dist/3"
    threshold: float = Field(5.0, gt=0)
    post_train_rounds: int = Field(10, ge=0)
    stop_rule: Literal["reach", "below"] = "reach"
    project: bool = True
    clean_half: Literal["target", "zero"] = "target"
    num_random: int = Field(10, ge=1)
    seed: int = 0

    @field_validator("radius")
    @classmethod
    def _check_radius(cls, value: RadiusSpec) -> RadiusSpec:
        if isinstance(value, str):
            dist_multiplier(value)
        elif value <= 0:
            raise ValueError("radius must be positive")
        return value


@dataclass(frozen=True)
class EpochTrace:
    epoch: int
    loss: float
    drift: float
    dist_to_center: float


@dataclass
class UnlearnOutcome:
    w_unlearn: SplitModel
    w_con: SplitModel
    radius: float
    stop_epoch: int
    final_drift: float
    stopped_early: bool = False
    trajectory: List[EpochTrace] = field(default_factory=list)
    # distance to W_con after every ascent step
    step_distances: List[float] = field(default_factory=list)


def constrained_model(
    w_global: SplitModel, w_target_prev: SplitModel, num_clients: int
) -> SplitModel:
    """W_con = (2N * W_global - W_target_prev) / (2N - 1), blockwise."""
    if num_clients < 1:
        raise ArgumentError("need at least one client")
    scale = 2 * num_clients
    return w_global.apply(lambda g, t: (scale * g - t) / (scale - 1), w_target_prev)


def mean_distance(center: ParamVector, others: Sequence[ParamVector]) -> float:
    return float(np.mean([l2_distance(center, other) for other in others]))


def calibrate_radius(
    w_con: SplitModel, num_random: int = 10, seed: int = 0, radius: RadiusSpec = "Dist/3"
) -> Tuple[float, float]:
    """Measure Dist (mean distance from W_con to fresh random models) and resolve R.

    Returns:
        (Dist, R)

    Raises:
        ArgumentError: If the resulting radius is not positive.
    """
    rng = np.random.default_rng(seed)
    randoms = [w_con.arch.initialize(rng).flatten() for _ in range(num_random)]
    dist = mean_distance(w_con.flatten(), randoms)
    value = resolve_radius(radius, dist)
    Logger.unlearn.info(f"Calibrated Dist={dist:.6f} over {num_random} models, R={value:.6f}")
    return dist, value


def _should_stop(rule: str, drift: float, threshold: float) -> bool:
    if rule == "reach":
        return drift >= threshold
    return drift < threshold


def _diverged(outcome: UnlearnOutcome, message: str) -> NumericError:
    Logger.unlearn.error(message)
    return NumericError(message, [asdict(t) for t in outcome.trajectory])


def run_unlearning(
    cfg: UnlearnConfig,
    w_global: SplitModel,
    w_target_prev: SplitModel,
    target_data: VerticalBatch,
    num_clients: int,
    radius: Optional[float] = None,
) -> UnlearnOutcome:
    """Projected gradient ascent on the target client's poisoned samples.

    Starts from the constrained model W_con, takes mini-batch ascent steps on
    the cross-entropy of ``target_data`` and projects back onto the ball of
    radius R around W_con after every step. After each epoch the drift from
    the target's last local model is checked against ``cfg.threshold``.

    Args:
        cfg: Unlearning configuration.
        w_global: Global model after the last training round.
        w_target_prev: Target client's last pre-aggregation local model.
        target_data: The only data this function sees: the target's samples.
        num_clients: N, the number of clients in training.
        radius: Resolved radius; falls back to ``cfg.radius`` when absolute.

    Raises:
        ArgumentError: On empty target data or an unresolved radius.
        NumericError: If the loss, the parameters or the drift become non-finite;
            carries the trajectory of the completed epochs.
    """
    if not len(target_data):
        raise ArgumentError("target client has no samples to unlearn")
    radius = resolve_radius(cfg.radius if radius is None else radius)

    w_con = constrained_model(w_global, w_target_prev, num_clients)
    arch = w_con.arch
    center = w_con.flatten()
    anchor = w_target_prev.flatten()
    w = center.copy()
    rng = np.random.default_rng(derive_seed(cfg.seed, "unlearn"))

    outcome = UnlearnOutcome(
        w_unlearn=w_con, w_con=w_con, radius=radius, stop_epoch=cfg.epochs, final_drift=0.0
    )
    n = len(target_data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch_size):
            batch = target_data[order[start : start + cfg.batch_size]]
            model = arch.from_flat(w)
            try:
                _, caches = split_forward(model, batch, training=True, rng=rng)
                grads, loss = split_backward(model, caches, batch.labels)
            except NumericError as exc:
                raise _diverged(
                    outcome, f"non-finite loss in unlearning epoch {epoch}: {exc}"
                ) from exc
            losses.append(loss)
            sizes.append(len(batch))
            w = ascent_step(w, grads.flatten(), cfg.lr)
            if cfg.project:
                w = project_to_ball(w, center, radius)
            step_distance = l2_distance(w, center)
            if not (np.isfinite(w).all() and math.isfinite(step_distance)):
                raise _diverged(outcome, f"non-finite parameters in unlearning epoch {epoch}")
            outcome.step_distances.append(step_distance)

        drift = l2_distance(w, anchor)
        if not math.isfinite(drift):
            raise _diverged(outcome, f"non-finite drift in unlearning epoch {epoch}")
        trace = EpochTrace(
            epoch=epoch,
            loss=float(np.average(losses, weights=sizes)),
            drift=drift,
            dist_to_center=outcome.step_distances[-1],
        )
        outcome.trajectory.append(trace)
        Logger.unlearn.info(
            f"Ascent epoch {epoch}/{cfg.epochs}: loss={trace.loss:.6f} "
            f"drift={drift:.6f} dist_to_center={trace.dist_to_center:.6f}"
        )
        if _should_stop(cfg.stop_rule, drift, cfg.threshold):
            outcome.stop_epoch = epoch
            outcome.stopped_early = True
            Logger.unlearn.info(f"Early stop at epoch {epoch} (T={cfg.threshold})")
            break

    outcome.w_unlearn = arch.from_flat(w)
    outcome.final_drift = outcome.trajectory[-1].drift
    return outcome


def post_train(
    w_unlearn: SplitModel,
    cfg: TrainConfig,
    rounds: int,
    clients: Sequence[ClientDataset],
    target_id: int,
    evaluator: Optional[Evaluator] = None,
) -> FedAvgResult:
    """Continue FedAvg from the unlearned model without the target client."""
    if rounds == 0:
        return FedAvgResult(model=w_unlearn)
    continued = cfg.without(target_id).model_copy(
        update={"epochs": rounds, "seed": derive_seed(cfg.seed, "post-train")}
    )
    return train_fedavg(
        continued,
        w_unlearn.arch,
        clients,
        evaluator=evaluator,
        initial=w_unlearn,
        phase="post_train",
    )


def _map_cells(fn: Callable, values: Sequence, workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(fn, values))
    return [fn(v) for v in values]


def _accuracies(evaluator: Optional[Evaluator], model: SplitModel):
    if evaluator is None:
        return math.nan, math.nan
    clean, backdoor = evaluator(model)
    return clean, math.nan if backdoor is None else backdoor


def grid_search_T(
    t_values: Sequence[float],
    cfg: UnlearnConfig,
    w_global: SplitModel,
    w_target_prev: SplitModel,
    target_data: VerticalBatch,
    num_clients: int,
    radius: float,
    evaluator: Optional[Evaluator] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """One unlearning run per threshold T, all with the same seeds.

    Returns:
        pd.DataFrame: columns ``T, clean_acc, backdoor_acc, stop_epoch,
        final_drift``, ascending in T.
    """

    def cell(t: float) -> dict:
        outcome = run_unlearning(
            cfg.model_copy(update={"threshold": t}),
            w_global,
            w_target_prev,
            target_data,
            num_clients,
            radius,
        )
        clean, backdoor = _accuracies(evaluator, outcome.w_unlearn)
        return {
            "T": float(t),
            "clean_acc": clean,
            "backdoor_acc": backdoor,
            "stop_epoch": outcome.stop_epoch,
            "final_drift": outcome.final_drift,
        }

    rows = _map_cells(cell, sorted(t_values), workers)
    return pd.DataFrame(rows, columns=["T", "clean_acc", "backdoor_acc", "stop_epoch", "final_drift"])


def grid_search_R(
    multipliers: Sequence[float],
    cfg: UnlearnConfig,
    w_global: SplitModel,
    w_target_prev: SplitModel,
    target_data: VerticalBatch,
    num_clients: int,
    dist: float,
    evaluator: Optional[Evaluator] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """One unlearning run per radius R = multiplier * Dist.

    Returns:
        pd.DataFrame: columns ``multiplier, R, clean_acc, backdoor_acc,
        stop_epoch, final_drift``, ascending in the multiplier.
    """

    def cell(multiplier: float) -> dict:
        radius = resolve_radius(multiplier * dist)
        outcome = run_unlearning(cfg, w_global, w_target_prev, target_data, num_clients, radius)
        clean, backdoor = _accuracies(evaluator, outcome.w_unlearn)
        return {
            "multiplier": float(multiplier),
            "R": radius,
            "clean_acc": clean,
            "backdoor_acc": backdoor,
            "stop_epoch": outcome.stop_epoch,
            "final_drift": outcome.final_drift,
        }

    rows = _map_cells(cell, sorted(multipliers), workers)
    return pd.DataFrame(
        rows,
        columns=["multiplier", "R", "clean_acc", "backdoor_acc", "stop_epoch", "final_drift"],
    )
