"""Independent re-derivations used as test oracles.

Nothing here imports the code under test; each function recomputes a result
from the raw formulas in one place.
"""
import math

import numpy as np

C_LIGHT = 2.99792458e8


def monolithic_total(p):
    """One-shot evaluation of the full latency chain from a flat parameter dict.

    Keys: A, f_c, p_v, e, s_in, s_task, frac, has_target, d_m, d_p, Bup_m, Bd_m,
    Bd_p, noise_m, noise_p, C_m, C_p, L_m, L_p, B_mig, B_mc, C_cloud, R_vc,
    dwell, rho.
    """
    frac = p["frac"] if p["has_target"] else 0.0
    gain = lambda d: p["A"] * (C_LIGHT / (4 * math.pi * p["f_c"] * max(d, 1.0))) ** 2
    snr_m = p["p_v"] * gain(p["d_m"]) / p["noise_m"]
    t_up = p["s_in"] / (p["Bup_m"] * math.log2(1 + snr_m))
    kept = (1 - frac) * p["s_task"]
    t_loc = (p["L_m"] + kept * p["e"]) / p["C_m"]
    s_mig = frac * p["s_task"]
    if p["has_target"] and s_mig > 0:
        t_pre = s_mig / p["B_mig"] + (p["L_p"] + s_mig * p["e"]) / p["C_p"]
        r_p = p["Bd_p"] * math.log2(1 + p["p_v"] * gain(p["d_p"]) / p["noise_p"])
        down_p = p["rho"] * s_mig / r_p
    else:
        t_pre = 0.0
        down_p = 0.0
    if t_up + t_loc <= p["dwell"]:
        s_c = 0.0
    else:
        s_c = min(max((p["L_m"] + kept * p["e"] - p["C_m"] * p["dwell"]) / p["e"], 0.0), kept)
    t_c = s_c / p["B_mc"] + s_c * p["e"] / p["C_cloud"]
    r_m = p["Bd_m"] * math.log2(1 + snr_m)
    t_d = p["rho"] * (p["s_task"] - s_mig) / r_m + down_p + p["rho"] * s_c / p["R_vc"]
    return t_up + max(t_loc, t_pre) + t_c + t_d


MB = 8e6


def random_latency_params(rng: np.random.Generator) -> dict:
    return {
        "A": rng.uniform(1.0, 6.0),
        "f_c": rng.uniform(1e9, 6e9),
        "p_v": rng.uniform(0.05, 1.0),
        "e": rng.uniform(0.2, 1.0) * 1e9 / MB,
        "s_in": rng.uniform(12, 20) * MB,
        "s_task": rng.uniform(50, 250) * MB,
        "frac": rng.uniform(0, 1),
        "has_target": bool(rng.integers(0, 2)),
        "d_m": rng.uniform(0, 400),
        "d_p": rng.uniform(0, 800),
        "Bup_m": rng.uniform(200e6, 600e6),
        "Bd_m": rng.uniform(200e6, 600e6),
        "Bd_p": rng.uniform(200e6, 600e6),
        "noise_m": 10 ** rng.uniform(-13, -9),
        "noise_p": 10 ** rng.uniform(-13, -9),
        "C_m": rng.uniform(10e9, 30e9),
        "C_p": rng.uniform(10e9, 30e9),
        "L_m": rng.uniform(0, 200e9),
        "L_p": rng.uniform(0, 200e9),
        "B_mig": rng.uniform(500e6, 900e6),
        "B_mc": rng.uniform(200e6, 2e9),
        "C_cloud": rng.uniform(50e9, 100e9),
        "R_vc": rng.uniform(50e6, 500e6),
        "dwell": rng.uniform(0, 40),
        "rho": rng.uniform(0, 1.5),
    }


def gae_brute_force(rewards, values, gamma, lam):
    """Q_t = V(o_t) + sum_{k>=t} (gamma*lam)^(k-t) delta_k with V(o_{T+1}) = 0, via a double loop."""
    T = len(rewards)
    v = list(values) + [0.0]
    deltas = [rewards[k] + gamma * v[k + 1] - v[k] for k in range(T)]
    out = []
    for t in range(T):
        acc = 0.0
        for k in range(t, T):
            acc += (gamma * lam) ** (k - t) * deltas[k]
        out.append(v[t] + acc)
    return out
