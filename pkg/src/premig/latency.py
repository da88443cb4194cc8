"""Per-vehicle, per-slot latency of an avatar task.

All sizes are bits, workloads cycles, capacities cycles/s, rates bits/s,
times seconds. Every function is pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

LIGHT_SPEED = 2.99792458e8
D_MIN = 1.0


class InfeasibleLinkError(ValueError):
    """A positive payload must cross a link that does not exist (rate 0/None)."""


@dataclass(frozen=True)
class ChannelParams:
    channel_gain_coefficient: float = 4.11
    carrier_frequency: float = 2.0e9
    light_speed: float = LIGHT_SPEED


@dataclass(frozen=True)
class TaskSpec:
    input_size: float
    task_size: float


@dataclass(frozen=True)
class MigrationDecision:
    target_rsu: int | None
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction {self.fraction} outside [0, 1]")
        if self.target_rsu is None and self.fraction != 0.0:
            object.__setattr__(self, "fraction", 0.0)


@dataclass(frozen=True)
class CloudSpec:
    gpu_capacity: float  # C_cloud
    vehicle_downlink_rate: float  # R_v^c


@dataclass(frozen=True)
class LatencyBreakdown:
    upload: float
    local_processing: float
    premigrated_processing: float
    migration: float
    cloud: float
    download: float
    total: float
    cloud_residual: float

    @classmethod
    def zero(cls) -> "LatencyBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def channel_gain(d: float, ch: ChannelParams, d_min: float = D_MIN) -> tuple[float, bool]:
    """Free-space style gain ``A (l / (4 pi f d))^2``; returns ``(gain, clamped)``."""
    clamped = d < d_min
    d = max(d, d_min)
    return ch.channel_gain_coefficient * (ch.light_speed / (4.0 * math.pi * ch.carrier_frequency * d)) ** 2, clamped


def link_rate(bandwidth: float, p: float, h: float, noise: float) -> float:
    return bandwidth * math.log2(1.0 + p * h / noise)


def _ratio(size: float, rate: float | None, what: str) -> float:
    if size <= 0.0:
        return 0.0
    if rate is None or rate <= 0.0:
        raise InfeasibleLinkError(f"{what}: {size:g} bits over a link of rate {rate}")
    return size / rate


def upload_latency(input_size: float, rate: float) -> float:
    if rate is None or rate <= 0.0:
        raise InfeasibleLinkError(f"uplink rate {rate}")
    return input_size / rate


def migration_latency(migrated_size: float, link: float | None) -> float:
    return _ratio(migrated_size, link, "migration")


def local_processing_latency(workload: float, task_size: float, fraction: float,
                             e_v: float, C_m: float) -> float:
    return (workload + (1.0 - fraction) * task_size * e_v) / C_m


def premigrated_processing_latency(mig_latency: float, workload_p: float, migrated_size: float,
                                   e_v: float, C_p: float) -> float:
    return mig_latency + (workload_p + migrated_size * e_v) / C_p


def cloud_residual(upload: float, local_proc: float, dwell: float, workload: float,
                   task_size: float, fraction: float, e_v: float, C_m: float) -> float:
    """Bits of the unmigrated task still unfinished when the vehicle leaves coverage.

    Clamped to ``[0, (1 - fraction) * task_size]``.
    """
    if upload + local_proc <= dwell:
        return 0.0
    kept = (1.0 - fraction) * task_size
    raw = (workload + kept * e_v - C_m * dwell) / e_v
    return min(max(raw, 0.0), kept)


def cloud_latency(residual: float, B_mc: float | None, e_v: float, C_cloud: float | None) -> float:
    if residual <= 0.0:
        return 0.0
    if not B_mc or not C_cloud or B_mc <= 0 or C_cloud <= 0:
        raise InfeasibleLinkError(f"cloud offload of {residual:g} bits without a cloud link")
    return residual / B_mc + residual * e_v / C_cloud


def download_latency(task_size: float, migrated_size: float, residual: float,
                     rate_serving: float | None, rate_target: float | None,
                     rate_cloud: float | None, rho: float = 1.0) -> float:
    """Result download; each portion's result is ``rho`` times its task size."""
    return (_ratio(rho * (task_size - migrated_size), rate_serving, "serving downlink")
            + _ratio(rho * migrated_size, rate_target, "target downlink")
            + _ratio(rho * residual, rate_cloud, "cloud downlink"))


def total_latency(upload: float, local_processing: float, premigrated_processing: float,
                  migration: float, cloud: float, download: float,
                  residual: float = 0.0) -> LatencyBreakdown:
    total = upload + max(local_processing, premigrated_processing) + cloud + download
    return LatencyBreakdown(upload, local_processing, premigrated_processing, migration,
                            cloud, download, total, residual)


# -- composed evaluation ------------------------------------------------------

@dataclass(frozen=True)
class LinkEnd:
    """Radio and compute view of one RSU as seen by one vehicle in one slot."""
    distance: float
    uplink_bandwidth: float
    downlink_bandwidth: float
    noise_power: float
    gpu_capacity: float
    workload: float


@dataclass(frozen=True)
class SlotContext:
    """Everything needed to price one vehicle's decision in one slot."""
    task: TaskSpec
    transmit_power: float
    cycles_per_bit: float
    serving: LinkEnd
    dwell: float
    cloud_link: float  # B_{m,c}
    cloud: CloudSpec
    channel: ChannelParams = ChannelParams()
    rho: float = 1.0
    serving_cap: float | None = None  # L_m^max; overflow beyond it spills to the cloud


def evaluate(ctx: SlotContext, fraction: float = 0.0, target: LinkEnd | None = None,
             migration_link: float | None = None) -> LatencyBreakdown:
    """Price a (target, fraction) decision by composing the component models."""
    if target is None:
        fraction = 0.0
    e_v, p_v = ctx.cycles_per_bit, ctx.transmit_power
    s_task = ctx.task.task_size
    s_mig = fraction * s_task

    h_m, _ = channel_gain(ctx.serving.distance, ctx.channel)
    r_up = link_rate(ctx.serving.uplink_bandwidth, p_v, h_m, ctx.serving.noise_power)
    r_down = link_rate(ctx.serving.downlink_bandwidth, p_v, h_m, ctx.serving.noise_power)
    t_up = upload_latency(ctx.task.input_size, r_up)

    t_local = local_processing_latency(ctx.serving.workload, s_task, fraction, e_v, ctx.serving.gpu_capacity)
    if target is not None and s_mig > 0:
        t_mig = migration_latency(s_mig, migration_link)
        t_pre = premigrated_processing_latency(t_mig, target.workload, s_mig, e_v, target.gpu_capacity)
        h_p, _ = channel_gain(target.distance, ctx.channel)
        r_target = link_rate(target.downlink_bandwidth, p_v, h_p, target.noise_power)
    else:
        t_mig = t_pre = 0.0
        r_target = None

    residual = cloud_residual(t_up, t_local, ctx.dwell, ctx.serving.workload, s_task, fraction,
                              e_v, ctx.serving.gpu_capacity)
    if ctx.serving_cap is not None:
        overflow = (ctx.serving.workload + (1.0 - fraction) * s_task * e_v - ctx.serving_cap) / e_v
        residual = min(max(residual, overflow, 0.0), (1.0 - fraction) * s_task)
    t_cloud = cloud_latency(residual, ctx.cloud_link, e_v, ctx.cloud.gpu_capacity)
    t_down = download_latency(s_task, s_mig, residual, r_down, r_target,
                              ctx.cloud.vehicle_downlink_rate, ctx.rho)
    return total_latency(t_up, t_local, t_pre, t_mig, t_cloud, t_down, residual)
