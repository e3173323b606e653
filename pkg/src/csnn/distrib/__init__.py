"""Domain decomposition, spike exchange, and multi-worker execution."""

from .partition import Partition, partition_columns
from .plan import ExchangePlan, build_exchange_plan
from .runner import WorkerFailed, check_budget, run_distributed
from .transport import Aborted, InProcTransport, PeerTimeout, TcpChannel
from .wire import FrameError, SpikeMessage, decode, encode

__all__ = [
    "Aborted", "ExchangePlan", "FrameError", "InProcTransport", "Partition", "PeerTimeout",
    "SpikeMessage", "TcpChannel", "WorkerFailed", "build_exchange_plan", "check_budget",
    "decode", "encode", "partition_columns", "run_distributed",
]
