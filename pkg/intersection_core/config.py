import logging
import os
from typing import Callable, Mapping, TypeVar

from .runtime import ChannelConfig
from .sqp import SQPConfig, SQPMode


logger = logging.getLogger(__name__)

T = TypeVar("T")

SQP_ENV = {
    "SQP_MODE": ("mode", lambda value: SQPMode(value.lower())),
    "SQP_GAMMA": ("gamma", float),
    "SQP_BETA": ("beta", float),
    "SQP_TOLERANCE": ("tolerance", float),
    "SQP_MAX_ITERS": ("max_sqp_iters", int),
    "SQP_MAX_LS_ITERS": ("max_ls_iters", int),
    "SQP_HESSIAN_FLOOR": ("hessian_floor", float),
    "SQP_RHO": ("rho", float),
}

CHANNEL_ENV = {
    "CHANNEL_DROP_PROBABILITY": ("drop_probability", float),
    "CHANNEL_LATENCY_TICKS": ("latency_ticks", int),
    "CHANNEL_JITTER_TICKS": ("jitter_ticks", int),
    "CHANNEL_SEED": ("seed", int),
    "CHANNEL_TIMEOUT_TICKS": ("timeout_ticks", int),
    "CHANNEL_MAX_RETRANSMISSIONS": ("max_retransmissions", int),
}


def load_sqp_config(env: Mapping[str, str] | None = None) -> SQPConfig:
    return _load(SQPConfig, SQP_ENV, os.environ if env is None else env)


def load_channel_config(env: Mapping[str, str] | None = None) -> ChannelConfig:
    return _load(ChannelConfig, CHANNEL_ENV, os.environ if env is None else env)


def _load(factory: Callable[..., T], table: Mapping[str, tuple[str, Callable]], env: Mapping[str, str]) -> T:
    values = {}
    for variable, (name, parse) in table.items():
        raw = env.get(variable)
        if raw is None or not raw.strip():
            continue
        try:
            values[name] = parse(raw.strip())
        except ValueError:
            logger.warning("ignoring %s=%r: not a valid %s", variable, raw, name)

    try:
        return factory(**values)
    except ValueError as exc:
        # out-of-range values fall back to defaults as a whole
        logger.warning("ignoring environment overrides: %s", exc)
        return factory()
