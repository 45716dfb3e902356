import threading

import pytest

from reader_service import ServiceConfig, create_server


@pytest.fixture(scope="module")
def service():
    """Stub-mode service on an ephemeral port; yields (url, config)."""
    config = ServiceConfig(port=0, mode="stub", seed=0, d=8, max_batch=16)
    server = create_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", config
    finally:
        server.shutdown()
        thread.join(timeout=5)
