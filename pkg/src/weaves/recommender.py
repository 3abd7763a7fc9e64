"""Runtime recommendation: tabular utility learning plus mining utilities.

A policy maps (state, action) pairs to utility estimates, selects actions
epsilon-greedily, and is trained by temporal-difference updates. States are
canonical tuples of (feature, value) pairs; actions are opaque hashable
keys whose ordinal is their position in the legal-action list, which makes
tie-breaking deterministic.

The module also carries the offline pieces: greedy box induction over a
performance database (recommendation regions at a confidence level), rule
extraction from a trained table, and staged composition under ordering and
guard constraints.
"""

import json
import random
from dataclasses import dataclass, field

from .errors import (
    EmptyDatabaseError,
    NoFeasibleCompositionError,
    NoLegalActionError,
)

EXPLORE = "explore"
EXPLOIT = "exploit"

DEFAULT_EPSILONS = {EXPLORE: 0.5, EXPLOIT: 0.05}


def state_key(features) -> tuple:
    """Canonical hashable state from a mapping or pair iterable."""
    if isinstance(features, dict):
        items = features.items()
    else:
        items = features
    return tuple(sorted((str(k), v) for k, v in items))


@dataclass(frozen=True, order=True)
class Action:
    kind: str
    payload: str = ""

    @property
    def key(self):
        return (self.kind, self.payload)


class QPolicy:
    def __init__(self, alpha=0.1, gamma=0.9, epsilons=None, mode=EXPLORE, seed=0):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        self.alpha = alpha
        self.gamma = gamma
        self.epsilons = dict(DEFAULT_EPSILONS, **(epsilons or {}))
        if not self.epsilons[EXPLORE] > self.epsilons[EXPLOIT] > 0:
            raise ValueError("need epsilon_explore > epsilon_exploit > 0")
        self.mode = mode
        self.epsilon = self.epsilons[mode]
        self.seed = seed
        self.rng = random.Random(seed)
        self.table = {}  # (state, action) -> utility

    def q(self, state, action) -> float:
        return self.table.get((state, action), 0.0)

    def set_mode(self, mode):
        if mode not in self.epsilons:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.epsilon = self.epsilons[mode]

    def select(self, state, actions, pruned=(), epsilon=None):
        """Epsilon-greedy choice among the legal actions.

        Pruned actions are removed before anything else, so they are never
        chosen no matter the utilities, epsilon, or seed. Ties go to the
        lowest ordinal (list position).
        """
        legal = [a for a in actions if a not in pruned]
        if not legal:
            raise NoLegalActionError(f"every action is pruned in state {state!r}")
        eps = self.epsilon if epsilon is None else epsilon
        if self.rng.random() < eps:
            return legal[self.rng.randrange(len(legal))]
        best = legal[0]
        best_q = self.q(state, best)
        for a in legal[1:]:
            qa = self.q(state, a)
            if qa > best_q:
                best, best_q = a, qa
        return best

    def update(self, state, action, reward, next_state=None, next_actions=()):
        """One temporal-difference step; a terminal next state contributes 0."""
        future = 0.0
        if next_state is not None and next_actions:
            future = max(self.q(next_state, a) for a in next_actions)
        old = self.q(state, action)
        self.table[(state, action)] = old + self.alpha * (reward + self.gamma * future - old)

    # --- persistence -----------------------------------------------------------

    def to_json(self) -> str:
        rows = [
            {"state": list(state), "action": action, "q": q}
            for (state, action), q in sorted(self.table.items(), key=lambda kv: repr(kv[0]))
        ]
        return json.dumps(
            {
                "version": 1,
                "alpha": self.alpha,
                "gamma": self.gamma,
                "mode": self.mode,
                "epsilons": self.epsilons,
                "seed": self.seed,
                "table": rows,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str):
        data = json.loads(text)
        if data.get("version") != 1:
            raise ValueError(f"unsupported policy version {data.get('version')}")
        policy = cls(
            alpha=data["alpha"],
            gamma=data["gamma"],
            epsilons={k: v for k, v in data["epsilons"].items()},
            mode=data["mode"],
            seed=data["seed"],
        )
        for row in data["table"]:
            state = tuple(tuple(p) if isinstance(p, list) else p for p in row["state"])
            action = row["action"]
            if isinstance(action, list):
                action = tuple(action)
            policy.table[(state, action)] = row["q"]
        return policy


# spec-level operation aliases

def select_action(policy, state, actions, pruned=()):
    return policy.select(state, actions, pruned=pruned)


def update_q(policy, state, action, reward, next_state=None, next_actions=()):
    policy.update(state, action, reward, next_state, next_actions)


def set_mode(policy, mode):
    policy.set_mode(mode)


class RuntimeRecommender:
    """Bridge between an executor and a policy.

    Keeps the per-episode failed-path exclusions and the feature
    augmentations surfaced by rollbacks; both survive checkpoint restores on
    purpose, which is what keeps the recommender off failed paths after a
    rollback lands it at the same decision point.
    """

    def __init__(self, policy, learn=True):
        self.policy = policy
        self.learn = learn  # frozen policies still prune, they just stop updating
        self.pruned = {}  # base state tuple -> set of actions
        self.extras = {}  # base state tuple -> tuple of extra feature pairs
        self.decisions = []  # ("select"|"reward"|"prune", state, action, payload)

    def reset_episode(self):
        self.pruned.clear()
        self.extras.clear()
        self.decisions.clear()

    def _augmented(self, features):
        """Q-table state: learning features plus any rollback-surfaced
        extras. Feature names starting with '#' identify the decision point
        (they key pruning) but are kept out of the learned state."""
        learn = tuple(f for f in features if not str(f[0]).startswith("#"))
        extra = self.extras.get(tuple(features))
        if extra:
            learn = learn + tuple(f for f in extra if not str(f[0]).startswith("#"))
        return state_key(learn)

    def select(self, features, actions):
        base = tuple(features)
        choice = self.policy.select(
            self._augmented(base), list(actions), pruned=self.pruned.get(base, ())
        )
        self.decisions.append(("select", base, choice, None))
        return choice

    def observe(self, features, action, reward, next_features=None, next_actions=None):
        base = tuple(features)
        if self.learn:
            nxt = state_key(tuple(next_features)) if next_features else None
            self.policy.update(
                self._augmented(base), action, reward, nxt, tuple(next_actions or ())
            )
        self.decisions.append(("reward", base, action, reward))

    def prune(self, state, action, tuple_view=None):
        base = tuple(state)
        self.pruned.setdefault(base, set()).add(action)
        if tuple_view:
            self.extras[base] = tuple(tuple_view)
        self.decisions.append(("prune", base, action, tuple(tuple_view or ())))


# --- staged composition ------------------------------------------------------------


@dataclass
class Stage:
    """One stage of an ordered composition.

    candidates are module names; guard, if given, takes (candidate,
    features) and may veto; effect, if given, takes (candidate, features)
    and returns features produced by this stage for the ones after it.
    """

    name: str
    candidates: list
    guard: object = None
    effect: object = None


def staged_compose(stages, policy, features=None, rng_epsilon=None):
    """Pick one candidate per stage, in order, honoring guards.

    Choices at stage k see every feature produced by stages before k.
    Returns [(stage name, choice), ...].
    """
    feats = dict(features or {})
    chosen = []
    for stage in stages:
        legal = [c for c in stage.candidates if stage.guard is None or stage.guard(c, feats)]
        if not legal:
            raise NoFeasibleCompositionError(
                f"stage {stage.name!r}: no candidate satisfies the guards"
            )
        state = state_key({"stage": stage.name, **feats})
        choice = policy.select(state, legal, epsilon=rng_epsilon)
        chosen.append((stage.name, choice))
        if stage.effect is not None:
            feats.update(stage.effect(choice, feats))
        feats["prev_stage"] = stage.name
    return chosen


# --- performance database and region mining ------------------------------------------


def mine_regions(records, methods, confidence, params):
    """Greedy axis-aligned box induction over a gridded database.

    records: dicts carrying the param values, "method", "outcome"
    ("success"/"failure") and "cost". Per grid cell, paired trials of the
    two methods vote; a cell prefers the first method when the winning
    fraction reaches the confidence level. Boxes are grown greedily per
    dimension over preferred cells and never overlap.
    """
    if not records:
        raise EmptyDatabaseError("no performance records")
    if not 0.5 < confidence <= 1.0:
        raise ValueError("confidence must lie in (0.5, 1]")
    a_name, b_name = methods
    axes = [sorted({r[p] for r in records}) for p in params]
    index = {p: {v: i for i, v in enumerate(ax)} for p, ax in zip(params, axes)}

    by_cell = {}
    for r in records:
        cell = tuple(index[p][r[p]] for p in params)
        by_cell.setdefault(cell, {a_name: [], b_name: []})
        if r["method"] in (a_name, b_name):
            by_cell[cell][r["method"]].append(r)

    preferred = set()
    for cell, groups in by_cell.items():
        pairs = min(len(groups[a_name]), len(groups[b_name]))
        if pairs == 0:
            continue
        wins = 0
        for i in range(pairs):
            ra, rb = groups[a_name][i], groups[b_name][i]
            a_ok = ra["outcome"] == "success"
            b_ok = rb["outcome"] == "success"
            if a_ok and (not b_ok or ra["cost"] < rb["cost"]):
                wins += 1
        if wins / pairs >= confidence:
            preferred.add(cell)

    boxes = []
    claimed = set()
    for cell in sorted(preferred):
        if cell in claimed:
            continue
        lo = list(cell)
        hi = list(cell)
        grown = {cell}
        for d in range(len(params)):
            while True:  # grow upward along dimension d
                nxt_hi = hi[d] + 1
                if nxt_hi >= len(axes[d]):
                    break
                layer = _layer_cells(lo, hi, d, nxt_hi)
                if all(c in preferred and c not in claimed for c in layer):
                    hi[d] = nxt_hi
                    grown |= set(layer)
                else:
                    break
        claimed |= grown
        boxes.append({
            p: (axes[i][lo[i]], axes[i][hi[i]]) for i, p in enumerate(params)
        })
    covered = {c for c in preferred}
    return RecommendationRegion(a_name, confidence, boxes, params, axes, covered)


def _layer_cells(lo, hi, d, coord):
    ranges = []
    for i in range(len(lo)):
        if i == d:
            ranges.append([coord])
        else:
            ranges.append(list(range(lo[i], hi[i] + 1)))
    cells = [()]
    for r in ranges:
        cells = [c + (v,) for c in cells for v in r]
    return cells


@dataclass
class RecommendationRegion:
    method: str
    confidence: float
    boxes: list
    params: list = field(default_factory=list)
    axes: list = field(default_factory=list)
    cells: set = field(default_factory=set)

    def contains(self, point) -> bool:
        """point: mapping param -> value; inside any box (inclusive)?"""
        for box in self.boxes:
            if all(box[p][0] <= point[p] <= box[p][1] for p in box):
                return True
        return False


# --- rule extraction -----------------------------------------------------------------


@dataclass
class PolicyRule:
    conditions: tuple  # ((feature, value), ...)
    action: object
    utility: float

    @property
    def text(self) -> str:
        conds = ", ".join(f"{name}({value})" for name, value in self.conditions)
        act = self.action
        if isinstance(act, tuple):
            act = "-".join(str(x) for x in act)
        return f"qvalue(1) :- {conds}, action({act})."


def extract_policy_rules(policy, margin=0.1):
    """One clause per state whose best action clearly beats the runner-up.

    States where the margin is below the threshold are omitted, so the
    induced policy is deliberately partial.
    """
    by_state = {}
    for (state, action), q in policy.table.items():
        by_state.setdefault(state, []).append((action, q))
    rules = []
    for state in sorted(by_state, key=repr):
        ranked = sorted(by_state[state], key=lambda aq: (-aq[1], repr(aq[0])))
        best_action, best_q = ranked[0]
        runner_q = ranked[1][1] if len(ranked) > 1 else None
        if runner_q is not None and best_q - runner_q < margin:
            continue
        rules.append(PolicyRule(tuple(state), best_action, best_q))
    return rules


# --- append-only performance database --------------------------------------------------


def append_records(path, records, fieldnames):
    """Append rows to a CSV database, writing the header on first use."""
    import csv
    import os

    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if fresh:
            writer.writeheader()
        for r in records:
            writer.writerow(r)


def read_records(path):
    import csv

    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
        return out
