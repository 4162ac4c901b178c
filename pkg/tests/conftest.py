import threading
import time

import pytest
import uvicorn

from studykit.api import create_app
from studykit.service import AppCore
from studykit.storage import FileStorage


@pytest.fixture
def storage(tmp_path):
    return FileStorage(tmp_path / "data")


@pytest.fixture
def core(storage):
    return AppCore(storage, test_mode=True)


class LiveServer:
    def __init__(self, base_url: str, core: AppCore):
        self.base_url = base_url
        self.core = core


@pytest.fixture
def live_server(tmp_path):
    """Real uvicorn server on a free port, backed by a virtual clock."""
    storage = FileStorage(tmp_path / "data")
    core = AppCore(storage, test_mode=True)
    app = create_app(core)
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield LiveServer(f"http://127.0.0.1:{port}", core)
    server.should_exit = True
    thread.join(timeout=5)
