"""Featureless context-dependent choice model.

The state starts as the indicator vector of the offered set, lifted into a
``width``-dimensional space (indicator in the first ``universe``
coordinates, zeros in the extra ones).  Each of ``depth`` residual layers
adds a learned interaction matrix applied to either

* the state masked back onto the offered set (``linear`` activation), or
* the elementwise square of the state (``quadratic`` activation).

Utilities are a linear readout of the final state, restricted to the
offered items.  A linear stack of depth L produces interaction effects up
to order L; a quadratic stack reaches order ``2**(L-1)`` because squaring
doubles the polynomial degree at every layer.  Multinomial logit and the
first-order contextual model are configuration presets of the same
recursion, not separate code paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateSetError, Node

FORMAT_VERSION = 1

ACTIVATIONS = ("linear", "quadratic")
OUTPUT_MODES = ("dense", "identity", "diagonal")

INIT_SCALE = 0.02


@dataclass(frozen=True)
class UtilityVector:
    """Per-slot utilities with -inf at dummy positions."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        finite = np.isfinite(self.values)
        if not np.array_equal(finite, self.mask):
            raise ValueError("utilities must be finite exactly on unmasked slots")


def choice_probabilities(utilities: UtilityVector) -> np.ndarray:
    """Masked softmax: exact zeros at dummy slots, stabilized by the max."""
    mask = utilities.mask
    if not mask.any():
        raise DegenerateSetError("no real alternatives to choose from")
    vals = utilities.values[mask]
    mx = vals.max()
    exps = np.exp(vals - mx)
    denom = math.fsum(exps.tolist())
    probs = np.zeros_like(utilities.values)
    probs[mask] = exps / denom
    return probs


def required_depth_quadratic(universe: int) -> int:
    """Layers needed for a quadratic stack to reach full interaction order."""
    if universe < 2:
        raise ValueError(f"universe must have at least 2 items, got {universe}")
    return math.ceil(1.0 + math.log2(universe - 1))


def max_interaction_order(model: "FeaturelessModel") -> int:
    if model.activation == "linear":
        return model.depth
    return 2 ** (model.depth - 1)


def _identity_block(universe: int, width: int) -> np.ndarray:
    block = np.zeros((universe, width))
    block[:, :universe] = np.eye(universe)
    return block


class FeaturelessModel:
    """Interaction-order-controlled utility model over an indexed universe.

    Parameters are plain float64 arrays mutated in place by the optimizer;
    each forward pass wraps them in fresh tape nodes.
    """

    kind = "featureless"

    def __init__(
        self,
        universe: int,
        width: int,
        depth: int,
        activation: str = "quadratic",
        rank: int | None = None,
        output_mode: str = "dense",
        first_layer_residual: bool = True,
        interactions_trainable: bool = True,
        seed: int = 0,
    ):
        if universe < 1:
            raise ValueError("universe must be positive")
        if width < universe:
            raise ValueError(f"width {width} must be at least universe {universe}")
        if depth < 1:
            raise ValueError("depth must be at least 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        if rank is not None and rank < 1:
            raise ValueError("rank must be positive when given")
        self.universe = universe
        self.width = width
        self.depth = depth
        self.activation = activation
        self.rank = rank
        self.output_mode = output_mode
        self.first_layer_residual = first_layer_residual
        self.interactions_trainable = interactions_trainable

        rng = np.random.default_rng(seed)
        self.layers: list = []
        for layer in range(depth):
            in_dim = universe if layer == 0 else width
            if rank is None:
                self.layers.append(rng.normal(0.0, INIT_SCALE, size=(width, in_dim)))
            else:
                factor_scale = math.sqrt(INIT_SCALE)
                left = rng.normal(0.0, factor_scale, size=(rank, width))
                right = rng.normal(0.0, factor_scale, size=(rank, in_dim))
                self.layers.append((left, right))
        if output_mode == "dense":
            self.readout = _identity_block(universe, width) + rng.normal(
                0.0, INIT_SCALE, size=(universe, width)
            )
        elif output_mode == "diagonal":
            self.readout = 1.0 + rng.normal(0.0, INIT_SCALE, size=(universe, 1))
        else:
            self.readout = None  # fixed [I | 0]

    # -- presets ------------------------------------------------------------

    @classmethod
    def deephalo(
        cls,
        universe: int,
        width: int | None = None,
        depth: int = 2,
        activation: str = "quadratic",
        rank: int | None = None,
        seed: int = 0,
    ) -> "FeaturelessModel":
        return cls(
            universe,
            width if width is not None else universe,
            depth,
            activation,
            rank=rank,
            seed=seed,
        )

    @classmethod
    def mnl(cls, universe: int, seed: int = 0) -> "FeaturelessModel":
        """Set-independent utilities: frozen zero interactions, trainable
        per-item readout."""
        model = cls(
            universe,
            universe,
            1,
            "linear",
            output_mode="diagonal",
            interactions_trainable=False,
            seed=seed,
        )
        model.layers = [np.zeros((universe, universe))]
        return model

    @classmethod
    def cmnl(cls, universe: int, seed: int = 0) -> "FeaturelessModel":
        """First-order contextual model: one dense linear layer, the
        readout frozen to the identity."""
        return cls(universe, universe, 1, "linear", output_mode="identity", seed=seed)

    # -- parameters ----------------------------------------------------------

    def trainables(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.interactions_trainable:
            for i, layer in enumerate(self.layers):
                if self.rank is None:
                    out.append((f"layer{i}", layer))
                else:
                    out.append((f"layer{i}.left", layer[0]))
                    out.append((f"layer{i}.right", layer[1]))
        if self.output_mode != "identity":
            out.append(("readout", self.readout))
        return out

    def make_param_nodes(self, trainable: bool = True) -> dict[str, Node]:
        wrap = ad.parameter if trainable else ad.constant
        trainable_names = {name for name, _ in self.trainables()}
        nodes = {}

        def lift(name, array):
            nodes[name] = wrap(array) if name in trainable_names else ad.constant(array)

        for i, layer in enumerate(self.layers):
            if self.rank is None:
                lift(f"layer{i}", layer)
            else:
                lift(f"layer{i}.left", layer[0])
                lift(f"layer{i}.right", layer[1])
        if self.output_mode != "identity":
            lift("readout", self.readout)
        return nodes

    def _layer_node(self, nodes: dict[str, Node], i: int) -> Node:
        if self.rank is None:
            return nodes[f"layer{i}"]
        return ad.matmul(ad.transpose(nodes[f"layer{i}.left"]), nodes[f"layer{i}.right"])

    # -- forward -------------------------------------------------------------

    def _check_ids(self, ids) -> tuple[int, ...]:
        ids = tuple(int(i) for i in ids)
        if not ids:
            raise DegenerateSetError("empty choice set")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate ids in {ids}")
        for i in ids:
            if not 0 <= i < self.universe:
                raise ValueError(f"id {i} outside universe of size {self.universe}")
        return ids

    def utilities_node(self, nodes: dict[str, Node], ids) -> Node:
        """Tape forward; returns the universe-length utility column."""
        ids = self._check_ids(ids)
        member = np.zeros(self.universe)
        member[list(ids)] = 1.0
        lift = np.zeros(self.width)
        lift[: self.universe] = member

        y = ad.constant(lift)
        increment = ad.matmul(self._layer_node(nodes, 0), ad.constant(member))
        y = ad.add(y, increment) if self.first_layer_residual else increment

        if self.activation == "linear" and self.depth > 1:
            # Extra coordinates stay unmasked so they can carry composites.
            gate = np.ones(self.width)
            gate[: self.universe] = member
            gate_node = ad.constant(gate)
        for layer in range(1, self.depth):
            if self.activation == "linear":
                inner = ad.hadamard(y, gate_node)
            else:
                inner = ad.elementwise_square(y)
            y = ad.add(y, ad.matmul(self._layer_node(nodes, layer), inner))

        if self.output_mode == "dense":
            return ad.matmul(nodes["readout"], y)
        projected = ad.matmul(
            ad.constant(_identity_block(self.universe, self.width)), y
        )
        if self.output_mode == "identity":
            return projected
        return ad.hadamard(nodes["readout"], projected)

    def forward(self, choice_set) -> UtilityVector:
        """Utilities over the universe: finite on the set, -inf elsewhere."""
        ids = self._check_ids(getattr(choice_set, "items", choice_set))
        nodes = self.make_param_nodes(trainable=False)
        u = self.utilities_node(nodes, ids)
        mask = np.zeros(self.universe, dtype=bool)
        mask[list(ids)] = True
        values = np.full(self.universe, -np.inf)
        values[mask] = u.value[mask, 0]
        return UtilityVector(values, mask)

    def set_utilities(self, ids) -> np.ndarray:
        """Utilities aligned with ``ids`` order (halo-extraction hook)."""
        ids = self._check_ids(ids)
        return self.forward(ids).values[list(ids)]

    def probabilities(self, choice_set) -> np.ndarray:
        return choice_probabilities(self.forward(choice_set))

    # -- training hooks --------------------------------------------------------

    def group_key(self, obs):
        return tuple(sorted(obs.choice_set.items))

    def _grouped_counts(self, observations):
        groups: dict[tuple[int, ...], np.ndarray] = {}
        for obs in observations:
            key = self.group_key(obs)
            if key not in groups:
                groups[key] = np.zeros(self.universe)
            groups[key][obs.chosen] += 1.0
        return groups

    def loss_node(self, nodes: dict[str, Node], observations, kind: str) -> Node:
        if not observations:
            raise ValueError("empty batch")
        groups = self._grouped_counts(observations)
        total = None
        for key in sorted(groups):
            counts = groups[key]
            mask = np.zeros(self.universe, dtype=bool)
            mask[list(key)] = True
            u = self.utilities_node(nodes, key)
            if kind == "nll":
                logp = ad.masked_log_softmax(u, mask)
                term = ad.scale(ad.sum_all(ad.hadamard(logp, ad.constant(counts))), -1.0)
            elif kind == "mse_onehot":
                p = ad.masked_softmax(u, mask)
                n_group = counts.sum()
                freq = counts / n_group
                quad = ad.sum_all(ad.hadamard(p, p))
                cross = ad.sum_all(ad.hadamard(p, ad.constant(freq)))
                per_obs = ad.add_scalar(ad.add(quad, ad.scale(cross, -2.0)), 1.0)
                term = ad.scale(per_obs, n_group / len(key))
            else:
                raise ValueError(f"unknown loss kind '{kind}'")
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, 1.0 / len(observations))

    def predict(self, obs) -> tuple[np.ndarray, np.ndarray, int]:
        """(slot probabilities, real slot indices, chosen slot)."""
        probs = self.probabilities(obs.choice_set.items)
        slots = np.array(sorted(obs.choice_set.items))
        return probs, slots, obs.chosen

    def chosen_slot(self, obs) -> int:
        return obs.chosen

    def snapshot(self) -> list[np.ndarray]:
        return [arr.copy() for _, arr in self.trainables()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for (_, arr), saved in zip(self.trainables(), snap):
            arr[...] = saved

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        matrices = {}
        for i, layer in enumerate(self.layers):
            if self.rank is None:
                matrices[f"layer{i}"] = layer.tolist()
            else:
                matrices[f"layer{i}.left"] = layer[0].tolist()
                matrices[f"layer{i}.right"] = layer[1].tolist()
        if self.readout is not None:
            matrices["readout"] = self.readout.tolist()
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "J": self.universe,
            "J_prime": self.width,
            "L": self.depth,
            "activation": self.activation,
            "rank_H": self.rank,
            "output_mode": self.output_mode,
            "first_layer_residual": self.first_layer_residual,
            "interactions_trainable": self.interactions_trainable,
            "matrices": matrices,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FeaturelessModel":
        if payload.get("kind") != cls.kind:
            raise ValueError(f"expected kind '{cls.kind}', got {payload.get('kind')!r}")
        if payload.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {payload.get('format_version')}")
        model = cls(
            payload["J"],
            payload["J_prime"],
            payload["L"],
            payload["activation"],
            rank=payload.get("rank_H"),
            output_mode=payload.get("output_mode", "dense"),
            first_layer_residual=payload.get("first_layer_residual", True),
            interactions_trainable=payload.get("interactions_trainable", True),
        )
        matrices = payload["matrices"]
        for i in range(model.depth):
            if model.rank is None:
                model.layers[i] = np.array(matrices[f"layer{i}"], dtype=float)
            else:
                model.layers[i] = (
                    np.array(matrices[f"layer{i}.left"], dtype=float),
                    np.array(matrices[f"layer{i}.right"], dtype=float),
                )
        if model.output_mode != "identity":
            model.readout = np.array(matrices["readout"], dtype=float)
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "FeaturelessModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.trainables())
