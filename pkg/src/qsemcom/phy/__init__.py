"""Physical layer: packing, coding, modulation, fading channel, surrogate."""

from .channel import (
    CalibrationTable,
    ChannelState,
    apply_channel,
    channel_encode,
    index_error_channel,
    measure_index_error_rate,
    transmit,
)
from .kernels import NUMBA_ENABLED
from .ldpc import LdpcCode, make_ldpc_code
from .modem import ModulatedFrame, demodulate, modulate
from .symbols import (
    SymbolBudget,
    pack_symbols,
    symbol_count,
    symbol_count_for_config,
    unpack_symbols,
)

__all__ = [
    "CalibrationTable",
    "ChannelState",
    "LdpcCode",
    "ModulatedFrame",
    "NUMBA_ENABLED",
    "SymbolBudget",
    "apply_channel",
    "channel_encode",
    "demodulate",
    "index_error_channel",
    "make_ldpc_code",
    "measure_index_error_rate",
    "modulate",
    "pack_symbols",
    "symbol_count",
    "symbol_count_for_config",
    "transmit",
    "unpack_symbols",
]
