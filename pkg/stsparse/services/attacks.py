"""
Graph poisoning attacks.

DICE flips random node pairs. PGD relaxes the flip indicators of every node
pair to s in [0, 1], ascends the surrogate's training loss, projects s back
onto {sum(s) <= budget} intersected with the unit box and finally samples a
discrete flip set. Min-Max runs the same ascent while periodically
retraining the surrogate on the relaxed graph.

Flip lists serialize as text, one `add|remove <i> <j>` per line.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from stsparse.errors import ContractError, InfeasibleBudgetError, ParseError
from stsparse.models.config import Arch, AttackKind, AttackSpec, ModelConfig, TrainConfig
from stsparse.models.graph import EdgeFlip, FlipAction, Graph
from stsparse.models.sparsity import DutyState
from stsparse.models.trained import TrainedModel
from stsparse.services import autodiff, networks
from stsparse.services.autodiff import Tape

PROJECTION_EPS = 1e-9


def _flippable_pairs(n: int) -> int:
    return n * (n - 1) // 2


def _check_budget(g: Graph, budget: int):
    if budget > _flippable_pairs(g.n):
        raise InfeasibleBudgetError(
            f"budget {budget} exceeds the {_flippable_pairs(g.n)} flippable pairs of a {g.n}-node graph"
        )


def dice_attack(g: Graph, spec: AttackSpec) -> List[EdgeFlip]:
    """
    Random flips: each flip removes a uniformly random existing edge with
    probability 0.5 and otherwise adds a uniformly random absent pair.

    No pair is flipped twice. With spec.label_aware, removals are restricted
    to edges inside a class and additions to pairs across classes, using
    only train and validation labels.
    """
    budget = spec.budget(g.edge_count)
    _check_budget(g, budget)
    if budget == 0:
        return []

    rng = np.random.default_rng(spec.seed)
    low, high = g.edge_list()
    edges = list(zip(low.tolist(), high.tolist()))
    edge_set = set(edges)

    known = g.train_mask | g.val_mask
    labels = g.labels
    if spec.label_aware:
        removable = [e for e in edges if known[e[0]] and known[e[1]] and labels[e[0]] == labels[e[1]]]
        labeled = np.flatnonzero(known)

        def addable(i: int, j: int) -> bool:
            return labels[i] != labels[j]

        add_pool = labeled
        class_sizes = np.bincount(labels[labeled], minlength=g.n_classes)
        cross_pairs = (len(labeled) ** 2 - int((class_sizes ** 2).sum())) // 2
        cross_edges = sum(
            1 for i, j in edges if known[i] and known[j] and labels[i] != labels[j]
        )
        n_addable = cross_pairs - cross_edges
    else:
        removable = edges
        add_pool = np.arange(g.n)
        n_addable = _flippable_pairs(g.n) - len(edges)

        def addable(i: int, j: int) -> bool:
            return True

    touched = set()
    removal_order = rng.permutation(len(removable))
    removal_cursor = 0
    adds = 0
    flips: List[EdgeFlip] = []

    while len(flips) < budget:
        can_remove = removal_cursor < len(removal_order)
        can_add = adds < n_addable
        if not can_remove and not can_add:
            raise InfeasibleBudgetError(
                f"only {len(flips)} of {budget} flips are available under the label-aware rule"
            )
        remove = rng.random() < 0.5
        if remove and not can_remove:
            remove = False
        elif not remove and not can_add:
            remove = True

        if remove:
            i, j = removable[removal_order[removal_cursor]]
            removal_cursor += 1
            touched.add((i, j))
            flips.append(EdgeFlip(i, j, FlipAction.REMOVE))
            continue

        while True:
            i, j = rng.choice(add_pool, size=2, replace=False)
            pair = (int(min(i, j)), int(max(i, j)))
            if pair not in edge_set and pair not in touched and addable(*pair):
                break
        touched.add(pair)
        adds += 1
        flips.append(EdgeFlip(pair[0], pair[1], FlipAction.ADD))

    logging.info(
        f"DICE{' (label-aware)' if spec.label_aware else ''}: {len(flips)} flips, "
        f"{adds} additions, {len(flips) - adds} removals"
    )
    return flips


def candidate_pairs(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Every unordered node pair as (i, j) with i > j."""
    return np.tril_indices(n, k=-1)


def project_budget(s: np.ndarray, budget: float, eps: float = PROJECTION_EPS) -> np.ndarray:
    """
    Project s onto {x in [0, 1]^m : sum(x) <= budget}.

    When clipping alone is not enough, the shift mu in clip(s - mu, 0, 1) is
    found by bisection; the upper bracket is returned so the sum never
    exceeds the budget.
    """
    s = np.asarray(s, dtype=np.float64)
    clipped = np.clip(s, 0.0, 1.0)
    if clipped.sum() <= budget:
        return clipped
    if budget <= 0:
        return np.zeros_like(s)

    def excess(mu: float) -> float:
        return np.clip(s - mu, 0.0, 1.0).sum() - budget

    lo, hi = float((s - 1.0).min()), float(s.max())
    for _ in range(200):
        if hi - lo < eps:
            break
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return np.clip(s - hi, 0.0, 1.0)


class _RelaxedObjective:
    """Surrogate training loss as a function of the relaxed flip vector."""

    def __init__(self, g: Graph, model_config: ModelConfig):
        if not g.train_mask.any():
            raise ContractError("attacks need a non-empty train mask")
        self.g = g
        self.model_config = model_config
        self.adj = g.adjacency.to_dense()
        self.rows, self.cols = candidate_pairs(g.n)
        self.features = networks.feature_matrix(g)

    def __call__(
        self,
        s: np.ndarray,
        weights: Sequence[np.ndarray],
        duty: Sequence[DutyState],
        with_grad: bool = True,
    ) -> Tuple[float, Optional[np.ndarray]]:
        tape = Tape()
        s_value = tape.parameter(np.array(s, dtype=np.float64, copy=True))
        perturbed = autodiff.pair_perturb(s_value, self.adj, self.rows, self.cols)
        operator = autodiff.sym_normalize(perturbed)
        params = [tape.constant(w) for w in weights]
        result = networks.model_pass(
            self.g, self.model_config, params, duty, False, None, operator, self.features
        )
        # only train labels enter the attack loss
        loss = autodiff.softmax_cross_entropy(result.logits, self.g.labels, self.g.train_mask)
        if not with_grad:
            return float(loss.data), None
        tape.backward(loss)
        return float(loss.data), s_value.grad

    def perturbed_propagation(self, s: np.ndarray) -> np.ndarray:
        tape = Tape()
        perturbed = autodiff.pair_perturb(tape.constant(s), self.adj, self.rows, self.cols)
        return autodiff.sym_normalize(perturbed).data

    def flips_from_indicator(self, chosen: np.ndarray) -> List[EdgeFlip]:
        flips = []
        for index in np.flatnonzero(chosen):
            i, j = int(self.rows[index]), int(self.cols[index])
            action = FlipAction.REMOVE if self.adj[i, j] else FlipAction.ADD
            flips.append(EdgeFlip(min(i, j), max(i, j), action))
        return sorted(flips)


def _ascent_step(s: np.ndarray, grad: np.ndarray, budget: int, eta: float, step: int) -> np.ndarray:
    lr = budget * eta / np.sqrt(step + 1)
    return project_budget(s + lr * grad, budget)


def _round(
    objective: _RelaxedObjective,
    s: np.ndarray,
    budget: int,
    weights: Sequence[np.ndarray],
    duty: Sequence[DutyState],
    samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Randomized rounding of the relaxed vector.

    Draws `samples` Bernoulli(s) vectors, skips those exceeding the budget,
    and also scores the deterministic top-budget choice; the feasible
    candidate with the highest loss wins.
    """
    greedy = np.zeros_like(s)
    top = np.argsort(-s, kind="stable")[:budget]
    greedy[top[s[top] > 0]] = 1.0
    best, best_loss = greedy, objective(greedy, weights, duty, with_grad=False)[0]

    for _ in range(samples):
        sampled = (rng.random(s.shape) < s).astype(np.float64)
        if sampled.sum() > budget:
            continue
        loss, _ = objective(sampled, weights, duty, with_grad=False)
        if loss > best_loss:
            best, best_loss = sampled, loss
    return best


def pgd_attack(g: Graph, victim: TrainedModel, spec: AttackSpec) -> List[EdgeFlip]:
    """Projected gradient ascent on the training loss of a fixed surrogate."""
    budget = spec.budget(g.edge_count)
    _check_budget(g, budget)
    if budget == 0:
        return []

    rng = np.random.default_rng(spec.seed)
    objective = _RelaxedObjective(g, victim.model_config)
    s = np.zeros(len(objective.rows))
    for step in range(spec.steps):
        loss, grad = objective(s, victim.weights, victim.duty)
        s = _ascent_step(s, grad, budget, spec.eta, step)
        logging.debug(f"PGD step {step}: loss {loss:.4f}, sum(s) {s.sum():.3f}")

    chosen = _round(objective, s, budget, victim.weights, victim.duty, spec.samples, rng)
    flips = objective.flips_from_indicator(chosen)
    final_loss, _ = objective(chosen, victim.weights, victim.duty, with_grad=False)
    logging.info(f"PGD: {len(flips)} flips (budget {budget}), surrogate loss {final_loss:.4f}")
    return flips


def minmax_attack(g: Graph, mcfg: ModelConfig, tcfg: TrainConfig, spec: AttackSpec) -> List[EdgeFlip]:
    """
    PGD ascent against a surrogate that is retrained on the relaxed graph
    every `retrain_every` steps for `inner_epochs` epochs.
    """
    budget = spec.budget(g.edge_count)
    _check_budget(g, budget)
    if budget == 0:
        return []

    rng = np.random.default_rng(spec.seed)
    surrogate = networks.train(g, mcfg, tcfg)
    weights, duty = surrogate.weights, surrogate.duty
    objective = _RelaxedObjective(g, mcfg)
    s = np.zeros(len(objective.rows))

    for step in range(spec.steps):
        if step > 0 and step % spec.retrain_every == 0 and spec.inner_epochs > 0:
            relaxed = g.with_propagation(objective.perturbed_propagation(s))
            inner = TrainConfig(
                epochs=spec.inner_epochs,
                lr=tcfg.lr,
                seed=tcfg.seed + step,
                weight_decay=tcfg.weight_decay,
                log_every=0,
            )
            retrained = networks.train(relaxed, mcfg, inner, initial_weights=weights)
            weights, duty = retrained.weights, retrained.duty
            logging.debug(f"Min-Max step {step}: surrogate retrained for {spec.inner_epochs} epochs")
        loss, grad = objective(s, weights, duty)
        s = _ascent_step(s, grad, budget, spec.eta, step)
        logging.debug(f"Min-Max step {step}: loss {loss:.4f}, sum(s) {s.sum():.3f}")

    chosen = _round(objective, s, budget, weights, duty, spec.samples, rng)
    flips = objective.flips_from_indicator(chosen)
    logging.info(f"Min-Max: {len(flips)} flips (budget {budget})")
    return flips


def surrogate_config(mcfg: Optional[ModelConfig] = None) -> ModelConfig:
    """The clean 2-layer GCN the gradient attacks differentiate through."""
    if mcfg is not None and mcfg.arch == Arch.GCN:
        return mcfg
    return ModelConfig(arch=Arch.GCN)


def run_attack(
    g: Graph,
    spec: AttackSpec,
    mcfg: Optional[ModelConfig] = None,
    tcfg: Optional[TrainConfig] = None,
) -> List[EdgeFlip]:
    """Generate flips for any attacker; gradient attacks use a clean-trained GCN surrogate."""
    tcfg = tcfg or TrainConfig(seed=spec.seed)
    if spec.kind == AttackKind.NONE or spec.rate == 0:
        return []
    if spec.kind == AttackKind.DICE:
        return dice_attack(g, spec)
    if spec.kind == AttackKind.PGD:
        victim = networks.train(g, surrogate_config(mcfg), tcfg)
        return pgd_attack(g, victim, spec)
    if spec.kind == AttackKind.MINMAX:
        return minmax_attack(g, surrogate_config(mcfg), tcfg, spec)
    raise ContractError(f"unknown attacker {spec.kind}")


def flips_to_text(flips: Sequence[EdgeFlip]) -> str:
    return "".join(f"{flip.action.value} {flip.i} {flip.j}\n" for flip in flips)


def flips_from_text(text: str, path: str = "<text>") -> List[EdgeFlip]:
    flips = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 3 or parts[0] not in ("add", "remove"):
            raise ParseError(path, line_number, f"expected 'add|remove <i> <j>', got {stripped!r}")
        try:
            i, j = int(parts[1]), int(parts[2])
            flips.append(EdgeFlip(i, j, FlipAction(parts[0])))
        except ValueError as e:
            raise ParseError(path, line_number, str(e)) from e
    return flips


def write_flips(path: Union[str, Path], flips: Sequence[EdgeFlip]) -> Path:
    """Write a flip list atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(flips_to_text(flips))
    os.replace(tmp, path)
    return path


def read_flips(path: Union[str, Path]) -> List[EdgeFlip]:
    path = Path(path)
    return flips_from_text(path.read_text(encoding="utf-8"), str(path))
