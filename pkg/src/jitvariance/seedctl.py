"""Seed plumbing for the NI factors.

A factor that is *off* gets the same seed in every run; a factor that is *on*
gets a seed that changes with the run index. Seeds are derived with ``mix``:

    fmix(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27; z *= 0x94D049BB133111EB
              z ^= z >> 31                       (all arithmetic mod 2**64)

    mix(a, b, c):
        h = fmix(a + GAMMA)
        h = fmix((h ^ b) + GAMMA)
        h = fmix((h ^ c) + GAMMA)                GAMMA = 0x9E3779B97F4A7C15

``fmix`` is the splitmix64 finalizer (two xor-shift-multiply rounds) and is
a bijection on 64-bit words, so for fixed ``a``, ``b`` the map ``c -> mix``
is injective, and likewise ``b -> mix`` for fixed ``a``, ``c``. Factor words
are the ASCII codes of the tags (W=87, D=68, B=66, P=80).

Each seed feeds its own Philox (counter-based) generator.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


class NiFactor(str, enum.Enum):
    W = "W"  # weight initialization
    D = "D"  # dropout masks
    B = "B"  # batch order
    P = "P"  # parallel-reduction order (GPU analog)

    @property
    def word(self) -> int:
        return ord(self.value)


FACTORS = (NiFactor.W, NiFactor.D, NiFactor.B, NiFactor.P)
ALGORITHMIC = (NiFactor.W, NiFactor.D, NiFactor.B)

FACTOR_LABELS = {
    NiFactor.W: "W (weight init)",
    NiFactor.D: "D (dropout)",
    NiFactor.B: "B (batch order)",
    NiFactor.P: "P (GPU analog)",
}


def fmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix(a: int, b: int, c: int) -> int:
    h = fmix64((a & MASK64) + GAMMA)
    h = fmix64((h ^ (b & MASK64)) + GAMMA)
    return fmix64((h ^ (c & MASK64)) + GAMMA)


def derive_seed(master: int, factor: NiFactor, run_index: int, on: bool) -> int:
    if run_index < 0:
        raise ValueError("run_index must be >= 0")
    return mix(master, NiFactor(factor).word, run_index + 1 if on else 0)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed & MASK64))


def entropy_seed() -> int:
    return secrets.randbits(64)


@dataclass(frozen=True)
class SettingSpec:
    id: str
    state: dict[NiFactor, bool]

    def is_on(self, factor: NiFactor) -> bool:
        return self.state[factor]

    @property
    def p_on(self) -> bool:
        return self.state[NiFactor.P]

    @property
    def base_id(self) -> str:
        """Id with the parallel prefix stripped (PW -> W)."""
        return self.id[1:] if self.p_on else self.id


_ALGO_ON = {
    "N": (),
    "A": ALGORITHMIC,
    "W": (NiFactor.W,),
    "D": (NiFactor.D,),
    "B": (NiFactor.B,),
}

SETTING_IDS = ("N", "A", "W", "D", "B", "PN", "PA", "PW", "PD", "PB")


def setting(setting_id: str) -> SettingSpec:
    p_on = setting_id.startswith("P")
    base = setting_id[1:] if p_on else setting_id
    if base not in _ALGO_ON or setting_id not in SETTING_IDS:
        raise ValueError(f"unknown setting {setting_id!r}; expected one of {', '.join(SETTING_IDS)}")
    state = {f: f in _ALGO_ON[base] for f in ALGORITHMIC}
    state[NiFactor.P] = p_on
    return SettingSpec(setting_id, state)


def all_settings() -> list[SettingSpec]:
    return [setting(s) for s in SETTING_IDS]


@dataclass(frozen=True)
class SeedPlan:
    master_seed: int
    run_index: int
    seeds: dict[NiFactor, int]

    def summary(self) -> dict[str, int]:
        return {f.value: self.seeds[f] for f in FACTORS}


def plan_for_run(spec: SettingSpec, master: int, run_index: int, entropy: bool = False) -> SeedPlan:
    """Seeds for one run. With ``entropy`` the on-factors draw OS randomness
    instead of master-derived seeds (the run is then not replayable)."""
    seeds = {}
    for f in FACTORS:
        on = spec.is_on(f)
        seeds[f] = entropy_seed() if (on and entropy) else derive_seed(master, f, run_index, on)
    return SeedPlan(master_seed=master, run_index=run_index, seeds=seeds)
