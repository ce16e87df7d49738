"""Central controller: vantage registry, experiment scheduling and report ingestion."""

from .service import ControllerClient, ControllerClientError, ServerThread, make_server
from .store import (
    Assignment,
    Conflict,
    ControllerError,
    ControllerStore,
    ExperimentSpec,
    NotFound,
    Selector,
    SubmitAck,
    Unauthorized,
)

__all__ = [
    "Assignment", "Conflict", "ControllerClient", "ControllerClientError", "ControllerError",
    "ControllerStore", "ExperimentSpec", "NotFound", "Selector", "ServerThread", "SubmitAck",
    "Unauthorized", "make_server",
]
