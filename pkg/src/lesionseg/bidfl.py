"""Bi-directional feature learning over a bank of dilated convolutions.

A bank of 3x3 convolutions with ascending dilation rates turns the top-layer
feature map into maps with growing receptive fields. Two refinement sweeps
then pass information through the bank: a forward sweep from the smallest
rate outward and a backward sweep from the largest rate inward, each step a
concat followed by a 1x1 reduction that keeps the channel count fixed. The
two refined sequences are finally merged into a single feature map, and a
per-level merge feeds the per-level score heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConvParams, ShapeMismatchError, Tensor, concat_channels, conv2d, relu
from .backbone import ConfigError, he_kernel

FUSION_STRATEGIES = ("concat_all", "ends", "sum")


@dataclass
class DilatedBank:
    rates: tuple[int, ...]
    maps: list[Tensor]

    def __post_init__(self):
        if len(self.rates) != len(self.maps) or not self.maps:
            raise ConfigError(
                f"{len(self.rates)} rates for {len(self.maps)} maps")
        if any(lo >= hi for lo, hi in zip(self.rates, self.rates[1:])):
            raise ConfigError(f"dilation rates must be strictly ascending: {self.rates}")
        shape = self.maps[0].shape
        for i, m in enumerate(self.maps):
            if m.shape != shape:
                raise ShapeMismatchError(
                    f"bank map {i} shape {m.shape} != map 0 shape {shape}")

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class BidflParams:
    bank_convs: list[ConvParams]
    forward_reducers: list[ConvParams]
    backward_reducers: list[ConvParams]
    level_reducers: list[ConvParams]
    fuse_reducer: ConvParams | None
    rates: tuple[int, ...] = ()

    def __post_init__(self):
        j = len(self.bank_convs)
        if len(self.forward_reducers) != j - 1 or len(self.backward_reducers) != j - 1:
            raise ConfigError(
                f"need {j - 1} reducers per direction for a {j}-level bank, got "
                f"{len(self.forward_reducers)} forward / {len(self.backward_reducers)} backward")
        if len(self.level_reducers) not in (0, j):
            raise ConfigError(
                f"need 0 or {j} per-level reducers, got {len(self.level_reducers)}")


def init_bidfl_params(in_channels: int, bank_channels: int, rates: tuple[int, ...],
                      seed: int, fusion: str = "concat_all") -> dict[str, Tensor]:
    if fusion not in FUSION_STRATEGIES:
        raise ConfigError(f"unknown fusion strategy {fusion!r}")
    rng = np.random.default_rng(seed)
    j = len(rates)
    params: dict[str, Tensor] = {}
    for i in range(j):
        params[f"bidfl.bank.{i}.kernel"] = he_kernel(rng, bank_channels, in_channels, 3)
        params[f"bidfl.bank.{i}.bias"] = Tensor(np.zeros(bank_channels), requires_grad=True)
    for direction in ("fwd", "bwd"):
        for i in range(j - 1):
            params[f"bidfl.{direction}.{i}.kernel"] = he_kernel(
                rng, bank_channels, 2 * bank_channels, 1)
            params[f"bidfl.{direction}.{i}.bias"] = Tensor(
                np.zeros(bank_channels), requires_grad=True)
    for i in range(j):
        params[f"bidfl.level.{i}.kernel"] = he_kernel(rng, bank_channels,
                                                      2 * bank_channels, 1)
        params[f"bidfl.level.{i}.bias"] = Tensor(np.zeros(bank_channels),
                                                 requires_grad=True)
    if fusion == "concat_all":
        params["bidfl.fuse.kernel"] = he_kernel(rng, bank_channels,
                                                2 * j * bank_channels, 1)
        params["bidfl.fuse.bias"] = Tensor(np.zeros(bank_channels), requires_grad=True)
    elif fusion == "ends":
        params["bidfl.fuse.kernel"] = he_kernel(rng, bank_channels,
                                                2 * bank_channels, 1)
        params["bidfl.fuse.bias"] = Tensor(np.zeros(bank_channels), requires_grad=True)
    return params


def bidfl_params_from(params: dict[str, Tensor], rates: tuple[int, ...],
                      fusion: str = "concat_all") -> BidflParams:
    j = len(rates)
    bank = [ConvParams(params[f"bidfl.bank.{i}.kernel"], params[f"bidfl.bank.{i}.bias"],
                       padding=rates[i], dilation=rates[i]) for i in range(j)]
    fwd = [ConvParams(params[f"bidfl.fwd.{i}.kernel"], params[f"bidfl.fwd.{i}.bias"])
           for i in range(j - 1)]
    bwd = [ConvParams(params[f"bidfl.bwd.{i}.kernel"], params[f"bidfl.bwd.{i}.bias"])
           for i in range(j - 1)]
    levels = [ConvParams(params[f"bidfl.level.{i}.kernel"], params[f"bidfl.level.{i}.bias"])
              for i in range(j)]
    fuse = None
    if fusion in ("concat_all", "ends"):
        fuse = ConvParams(params["bidfl.fuse.kernel"], params["bidfl.fuse.bias"])
    return BidflParams(bank_convs=bank, forward_reducers=fwd, backward_reducers=bwd,
                       level_reducers=levels, fuse_reducer=fuse, rates=tuple(rates))


def _maybe_relu(x: Tensor, apply: bool) -> Tensor:
    return relu(x) if apply else x


def dilated_bank(f0: Tensor, params: BidflParams, apply_relu: bool = True) -> DilatedBank:
    """One same-padded 3x3 conv per dilation rate over the shared input."""
    maps = [_maybe_relu(conv2d(f0, conv), apply_relu) for conv in params.bank_convs]
    return DilatedBank(rates=params.rates, maps=maps)


def forward_pass(bank: DilatedBank, params: BidflParams,
                 apply_relu: bool = True) -> list[Tensor]:
    """Refine from the smallest rate outward; level j sees levels 1..j only."""
    refined = [bank.maps[0]]
    for j in range(1, len(bank)):
        merged = concat_channels([refined[-1], bank.maps[j]])
        refined.append(_maybe_relu(conv2d(merged, params.forward_reducers[j - 1]),
                                   apply_relu))
    return refined


def backward_pass(bank: DilatedBank, params: BidflParams,
                  apply_relu: bool = True) -> list[Tensor]:
    """Mirror sweep from the largest rate inward; level j sees levels j..J."""
    j_total = len(bank)
    refined = [bank.maps[-1]]
    for j in range(j_total - 2, -1, -1):
        merged = concat_channels([refined[0], bank.maps[j]])
        refined.insert(0, _maybe_relu(conv2d(merged, params.backward_reducers[j]),
                                      apply_relu))
    return refined


def fuse_bidirectional(fwd: list[Tensor], bwd: list[Tensor], params: BidflParams,
                       strategy: str = "concat_all", apply_relu: bool = True) -> Tensor:
    """Merge the two refined sequences into one bank-channel feature map."""
    if len(fwd) != len(bwd):
        raise ShapeMismatchError(
            f"directional lists differ in length: {len(fwd)} vs {len(bwd)}")
    for a, b in zip(fwd, bwd):
        if a.shape != b.shape:
            raise ShapeMismatchError(
                f"directional map shapes differ: {a.shape} vs {b.shape}")
    if strategy == "concat_all":
        merged = concat_channels(list(fwd) + list(bwd))
        return _maybe_relu(conv2d(merged, params.fuse_reducer), apply_relu)
    if strategy == "ends":
        merged = concat_channels([fwd[-1], bwd[0]])
        return _maybe_relu(conv2d(merged, params.fuse_reducer), apply_relu)
    if strategy == "sum":
        out = fwd[0]
        for m in fwd[1:]:
            out = out + m
        for m in bwd:
            out = out + m
        return out
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def per_level_maps(fwd: list[Tensor], bwd: list[Tensor], params: BidflParams,
                   apply_relu: bool = True) -> list[Tensor]:
    """Per-level merge of both directions, feeding the per-level score heads."""
    if len(fwd) != len(bwd) or len(fwd) != len(params.level_reducers):
        raise ShapeMismatchError(
            f"{len(fwd)}/{len(bwd)} directional maps for "
            f"{len(params.level_reducers)} level reducers")
    out = []
    for f, b, conv in zip(fwd, bwd, params.level_reducers):
        out.append(_maybe_relu(conv2d(concat_channels([f, b]), conv), apply_relu))
    return out
