"""Per-device energy accounting: computation, uplink transmission, carbon."""

import math
from dataclasses import dataclass, replace

BITS_PER_PARAM = 32
DEFAULT_JOULES_PER_FLOP = 1e-11


@dataclass(frozen=True)
class ChannelConfig:
    tx_power_w: float = 0.1
    bandwidth_hz: float = 2e6
    noise_w_per_hz: float = 1e-9
    distance_m: float = 50.0

    def __post_init__(self):
        for name in ("tx_power_w", "bandwidth_hz", "noise_w_per_hz", "distance_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class EnergyLedger:
    e_comp_j: float = 0.0
    e_tx_j: float = 0.0
    bits_sent: int = 0
    rounds: int = 0

    @property
    def e_total_j(self):
        return self.e_comp_j + self.e_tx_j


def shannon_rate(ch):
    """Uplink rate in bit/s with path loss proportional to distance."""
    snr = ch.tx_power_w / (ch.distance_m * ch.bandwidth_hz * ch.noise_w_per_hz)
    return ch.bandwidth_hz * math.log2(1.0 + snr)


def payload_bits(param_count):
    return BITS_PER_PARAM * param_count


def upload_seconds(param_count, ch):
    return payload_bits(param_count) / shannon_rate(ch)


def upload_energy(param_count, ch):
    return payload_bits(param_count) * ch.tx_power_w / shannon_rate(ch)


def charge_computation(ledger, iterations, e_per_iter):
    if e_per_iter < 0 or iterations < 0:
        raise ValueError("iterations and e_per_iter must be >= 0")
    return replace(ledger, e_comp_j=ledger.e_comp_j + iterations * e_per_iter)


def charge_transmission(ledger, param_count, ch):
    if param_count < 1:
        raise ValueError("param_count must be >= 1")
    return replace(
        ledger,
        e_tx_j=ledger.e_tx_j + upload_energy(param_count, ch),
        bits_sent=ledger.bits_sent + payload_bits(param_count),
        rounds=ledger.rounds + 1,
    )


def carbon(ledger, kg_per_megajoule):
    if kg_per_megajoule < 0:
        raise ValueError("kg_per_megajoule must be >= 0")
    return ledger.e_total_j / 1e6 * kg_per_megajoule


def energy_per_iteration(model, batch_size, joules_per_flop=DEFAULT_JOULES_PER_FLOP):
    return model.flops_per_step(batch_size) * joules_per_flop


def full_batch_multiplier(shard_size, batch_size):
    """Computation charge multiplier for an iteration that touches the whole shard."""
    return shard_size / batch_size


def total(ledgers):
    out = EnergyLedger()
    for lg in ledgers:
        out = EnergyLedger(
            out.e_comp_j + lg.e_comp_j,
            out.e_tx_j + lg.e_tx_j,
            out.bits_sent + lg.bits_sent,
            out.rounds + lg.rounds,
        )
    return out
