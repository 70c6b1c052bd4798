"""Byte-exact communication cost model and the append-only meter.

The closed forms below mirror the simulator's wire traffic frame for
frame, so for any configuration the simulator can run they must equal
the metered ledger exactly.  Session initialization is quadratic in the
cohort size (hostname list fan-out plus pairwise handshake containers);
aggregation is linear in model dimension and population.

Cost of one session init, with u uncached pairs among a cohort of k_s:

    k_s * (21 + 30*k_s)      key-setup fan-out (17B header + 4B count
                             + 30B per listed hostname)
    k_s * 21                 first response wave: every member uploads a
                             container batch, empty or not
    5 * k_s * 21             remaining routed waves (present only when
                             u > 0): batch framing to and from every
                             member for handshake legs 2 and 3
    832 * u                  container bytes for the three handshake
                             legs, each container relayed twice
                             (client->coordinator, coordinator->client):
                             2 * (3*64 + 32 + 112 + 80)

Aggregation per round with model dimension d, population k, cohort k_s:

    k_s * 17                 masked-input requests (header only)
    k_s * (17 + 4 + 8d + 8)  masked updates: dimension, 8-byte words,
                             masked count
    k * (17 + 4 + 4d)        global model to every subscriber (binary32)

The plain baseline replaces the masked update with an unmasked one
(dimension + binary32 weights + 4-byte sample count) and skips session
init entirely.
"""

import csv
import math
import threading
from collections import namedtuple
from dataclasses import dataclass


class CostModelError(Exception):
    pass


@dataclass(frozen=True)
class SizeProfile:
    hostname_bytes: int = 30
    dh_public_bytes: int = 32
    signature_bytes: int = 64
    mac_bytes: int = 16
    word_bytes: int = 8
    float_bytes: int = 4
    header_bytes: int = 17
    count_field_bytes: int = 4
    # src + dst hostnames + payload length field, per relayed container
    container_overhead: int = 64

    @property
    def msg1_bytes(self) -> int:
        return self.dh_public_bytes

    @property
    def msg2_bytes(self) -> int:
        return self.dh_public_bytes + self.signature_bytes + self.mac_bytes

    @property
    def msg3_bytes(self) -> int:
        return self.signature_bytes + self.mac_bytes

    @property
    def batch_frame_bytes(self) -> int:
        return self.header_bytes + self.count_field_bytes

    def pair_container_bytes(self) -> int:
        # three legs, each container metered on both hops of the relay
        legs = self.msg1_bytes + self.msg2_bytes + self.msg3_bytes
        return 2 * (3 * self.container_overhead + legs)

    def keysetup_frame_bytes(self, k_s: int) -> int:
        return (self.header_bytes + self.count_field_bytes
                + self.hostname_bytes * k_s)

    def masked_response_bytes(self, dim: int) -> int:
        return (self.header_bytes + self.count_field_bytes
                + self.word_bytes * dim + self.word_bytes)

    def global_update_bytes(self, dim: int) -> int:
        return (self.header_bytes + self.count_field_bytes
                + self.float_bytes * dim)

    def plain_response_bytes(self, dim: int) -> int:
        return (self.header_bytes + self.count_field_bytes
                + self.float_bytes * dim + self.count_field_bytes)


LedgerRow = namedtuple("LedgerRow", ["round_no", "phase", "direction",
                                     "msg_type", "bytes"])

PHASES = ("init", "aggregation")
DIRECTIONS = ("uplink", "downlink")


class CostLedger:
    """Append-only record of every transmitted frame."""

    def __init__(self):
        self._rows: list[LedgerRow] = []
        self._lock = threading.Lock()

    def add(self, round_no: int, phase: str, direction: str, msg_type: int,
            nbytes: int) -> None:
        if phase not in PHASES:
            raise CostModelError(f"unknown phase {phase!r}")
        if direction not in DIRECTIONS:
            raise CostModelError(f"unknown direction {direction!r}")
        if nbytes <= 0:
            raise CostModelError(f"non-positive byte count {nbytes}")
        with self._lock:
            self._rows.append(LedgerRow(round_no, phase, direction,
                                        msg_type, nbytes))

    @property
    def rows(self) -> tuple[LedgerRow, ...]:
        with self._lock:
            return tuple(self._rows)

    def total(self, round_no=None, phase=None, direction=None,
              msg_type=None) -> int:
        return sum(
            r.bytes for r in self.rows
            if (round_no is None or r.round_no == round_no)
            and (phase is None or r.phase == phase)
            and (direction is None or r.direction == direction)
            and (msg_type is None or r.msg_type == msg_type)
        )

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "phase", "direction", "msg_type", "bytes"])
            for r in self.rows:
                writer.writerow([r.round_no, r.phase, r.direction,
                                 f"0x{r.msg_type:02X}", r.bytes])


def p_key_exchange(k: int, k_s: int, t: int) -> float:
    """Probability a given pair still needs a key exchange at round t."""
    if k < 2:
        raise CostModelError(f"population {k} too small for pairwise selection")
    if not 1 <= k_s <= k:
        raise CostModelError(f"cohort {k_s} outside 1..{k}")
    if t < 0:
        raise CostModelError(f"negative round count {t}")
    both_selected = (k_s / k) * ((k_s - 1) / (k - 1))
    return (1.0 - both_selected) ** t


def expected_cached_fraction(k: int, k_s: int, t: int) -> float:
    return 1.0 - p_key_exchange(k, k_s, t)


def analytic_init_cost(k_s: int, k: int, profile: SizeProfile,
                       cached_pair_fraction: float = 0.0) -> float:
    """Session-init bytes for one round; exact when the fraction maps to a
    whole number of cached pairs."""
    if k_s < 0 or k_s > k:
        raise CostModelError(f"cohort {k_s} outside 0..{k}")
    if not 0.0 <= cached_pair_fraction <= 1.0:
        raise CostModelError(
            f"cached fraction {cached_pair_fraction} outside [0, 1]")
    if k_s == 0:
        return 0.0
    pairs = k_s * (k_s - 1) // 2
    uncached = (1.0 - cached_pair_fraction) * pairs
    total = float(k_s * profile.keysetup_frame_bytes(k_s))
    total += k_s * profile.batch_frame_bytes
    if uncached > 0:
        total += 5 * k_s * profile.batch_frame_bytes
        total += profile.pair_container_bytes() * uncached
    return total


def init_cost_floor(k_s: int, profile: SizeProfile) -> float:
    """Per-round init bytes once every pair secret is cached."""
    return analytic_init_cost(k_s, max(k_s, 2), profile, 1.0)


def expected_init_cost(k: int, k_s: int, t: int, profile: SizeProfile) -> float:
    """Expected init bytes for round t under the selection probability law.

    Uses linearity of expectation for the container term; the five routed
    batch waves are counted whenever the exchange probability is nonzero,
    which overstates the framing slightly once exchanges become rare.
    """
    p = p_key_exchange(k, k_s, t)
    pairs = k_s * (k_s - 1) / 2
    total = float(k_s * profile.keysetup_frame_bytes(k_s))
    total += k_s * profile.batch_frame_bytes
    if p > 0 and pairs > 0:
        total += 5 * k_s * profile.batch_frame_bytes
        total += profile.pair_container_bytes() * pairs * p
    return total


def analytic_agg_cost(dim: int, k: int, k_s: int, profile: SizeProfile) -> int:
    if dim < 0 or k_s < 0 or k < k_s:
        raise CostModelError(f"bad aggregation shape d={dim} k={k} k_s={k_s}")
    return (k_s * profile.header_bytes
            + k_s * profile.masked_response_bytes(dim)
            + k * profile.global_update_bytes(dim))


def plain_agg_cost(dim: int, k: int, k_s: int, profile: SizeProfile) -> int:
    return (k_s * profile.header_bytes
            + k_s * profile.plain_response_bytes(dim)
            + k * profile.global_update_bytes(dim))


def def_ratio(init_cumulative: float, agg_per_round: float,
              plain_per_round: float, rounds: int) -> float:
    """Data expansion factor over the first `rounds` rounds."""
    if rounds < 1:
        raise CostModelError(f"horizon {rounds} must be at least one round")
    if plain_per_round <= 0:
        raise CostModelError("plain-protocol cost must be positive")
    return (init_cumulative + rounds * agg_per_round) / (rounds * plain_per_round)


@dataclass(frozen=True)
class ParametricBaseline:
    """User-supplied per-client byte coefficients for comparing against a
    published secure-aggregation scheme; nothing is hard-coded here."""

    per_client_fixed: float = 0.0
    per_client_per_weight: float = 0.0
    per_round_fixed: float = 0.0

    def round_cost(self, dim: int, k_s: int) -> float:
        return (self.per_round_fixed
                + k_s * (self.per_client_fixed
                         + self.per_client_per_weight * dim))


def cohort_size(k: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise CostModelError(f"selection fraction {fraction} outside (0, 1]")
    return math.ceil(fraction * k)


def sweep_selection_fraction(path: str, profile: SizeProfile,
                             k: int = 100_000, dim: int = 1_000_000,
                             points: int = 100) -> dict:
    """First-round init cost vs aggregation cost as the selection fraction
    sweeps up to 1; reports the crossover fraction if one exists."""
    rows = []
    crossover = None
    for i in range(1, points + 1):
        fraction = i / points
        k_s = cohort_size(k, fraction)
        init = analytic_init_cost(k_s, k, profile, 0.0)
        agg = analytic_agg_cost(dim, k, k_s, profile)
        if crossover is None and init > agg:
            crossover = fraction
        rows.append((fraction, k_s, init, agg))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["C", "K_s", "init_bytes", "agg_bytes"])
        for fraction, k_s, init, agg in rows:
            writer.writerow([f"{fraction:.6g}", k_s, f"{init:.0f}", agg])
    return {"rows": rows, "crossover": crossover}


def sweep_rounds(path: str, profile: SizeProfile, k: int, fraction: float,
                 dim: int, horizon: int = 25) -> dict:
    """Cumulative cost vs round: init with caching, init without, aggregation."""
    k_s = cohort_size(k, fraction)
    agg = analytic_agg_cost(dim, k, k_s, profile)
    nocache_per_round = analytic_init_cost(k_s, k, profile, 0.0)
    rows = []
    cum_cached = 0.0
    for t in range(1, horizon + 1):
        cum_cached += expected_init_cost(k, k_s, t - 1, profile)
        rows.append((t, cum_cached, nocache_per_round * t, agg * t))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cum_init_cached", "cum_init_nocache", "cum_agg"])
        for t, cached, nocache, cum_agg in rows:
            writer.writerow([t, f"{cached:.2f}", f"{nocache:.0f}", cum_agg])
    return {"rows": rows, "k_s": k_s}


DEFAULT_OPERATOR_SIZES = (4237, 67067)
MODEL_BYTES_BOUND = 241_376_928


def sweep_model_size(path: str, profile: SizeProfile, fraction: float,
                     operator_sizes=DEFAULT_OPERATOR_SIZES,
                     baseline: ParametricBaseline | None = None) -> dict:
    """DEF vs model size in bytes for reference fleet sizes; the d column is
    the serialized float32 model size, swept up to a 241,376,928-byte model."""
    sizes = [2 ** e for e in range(10, 28)] + [MODEL_BYTES_BOUND]
    rows = []
    for k in operator_sizes:
        k_s = cohort_size(k, fraction)
        for model_bytes in sizes:
            dim = model_bytes // profile.float_bytes
            agg = analytic_agg_cost(dim, k, k_s, profile)
            plain = plain_agg_cost(dim, k, k_s, profile)
            first = def_ratio(analytic_init_cost(k_s, k, profile, 0.0),
                              agg, plain, 1)
            converged = def_ratio(init_cost_floor(k_s, profile), agg, plain, 1)
            row = [model_bytes, k, first, converged]
            if baseline is not None:
                row.append(baseline.round_cost(dim, k_s) / plain)
            rows.append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["d", "K", "def_t1", "def_converged"]
        if baseline is not None:
            header.append("baseline_ratio")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], row[1]] + [f"{v:.8f}" for v in row[2:]])
    return {"rows": rows}


def check_sweeps(fraction_result: dict | None = None,
                 rounds_result: dict | None = None,
                 model_result: dict | None = None
                 ) -> list[tuple[str, bool, str]]:
    """Structural assertions over the sweep outputs, for the --check flag.

    Any argument may be None; its check group is then skipped."""
    checks = []

    if fraction_result is not None:
        fr = fraction_result["rows"]
        init_monotone = all(a[2] <= b[2] for a, b in zip(fr, fr[1:]))
        agg_monotone = all(a[3] <= b[3] for a, b in zip(fr, fr[1:]))
        crossover = fraction_result["crossover"]
        checks.append(("fraction_sweep_init_monotone", init_monotone,
                       "init bytes non-decreasing in C"))
        checks.append(("fraction_sweep_agg_monotone", agg_monotone,
                       "aggregation bytes non-decreasing in C"))
        checks.append(("fraction_sweep_crossover_exists",
                       crossover is not None,
                       f"init exceeds aggregation from C*={crossover}"))

    if rounds_result is not None:
        rr = rounds_result["rows"]
        cached = [r[1] for r in rr]
        nocache = [r[2] for r in rr]
        incs = [b - a for a, b in zip(cached, cached[1:])]
        non_increasing = all(b <= a + 1e-9 for a, b in zip(incs, incs[1:]))
        checks.append(("rounds_sweep_cached_concave", non_increasing,
                       "cached init increments never grow"))
        linear = len(set(round(b - a, 6)
                         for a, b in zip(nocache, nocache[1:]))) <= 1
        checks.append(("rounds_sweep_nocache_linear", linear,
                       "uncached init cost exactly linear in t"))

    if model_result is not None:
        mr = model_result["rows"]
        above_one = all(r[2] >= 1.0 and r[3] >= 1.0 for r in mr)
        converged_below = all(r[3] <= r[2] for r in mr)
        checks.append(("model_sweep_def_above_one", above_one,
                       "expansion factor never below 1"))
        checks.append(("model_sweep_converged_below_first", converged_below,
                       "long-run expansion at or below first-round expansion"))
        by_k: dict[int, list] = {}
        for r in mr:
            by_k.setdefault(r[1], []).append(r)
        decreasing = all(
            all(a[2] >= b[2] - 1e-12 for a, b in zip(rows_k, rows_k[1:]))
            for rows_k in by_k.values()
        )
        checks.append(("model_sweep_def_decreasing_in_d", decreasing,
                       "expansion factor shrinks as the model grows"))
    return checks
