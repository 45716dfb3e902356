"""HTTP reader service: out-of-process reading, backward reading and token
encoding behind the JSON wire protocol."""

from .config import ServiceConfig
from .service import create_server, serve

__all__ = ["ServiceConfig", "create_server", "serve"]
