import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from prudex.errors import OfflineError, TransportError
from prudex.fetch import cache_path, fetch_remote_csv


class _Handler(BaseHTTPRequestHandler):
    hits = []

    def do_GET(self):
        _Handler.hits.append(self.path)
        if "BAD" in self.path:
            self.send_response(503)
            self.end_headers()
            self.wfile.write(b"busy")
            return
        sym = self.path.strip("/").split("/")[0]
        body = f"date,ticker,close\n2020-01-01,{sym},1.0\n2020-01-02,{sym},1.5\n".encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    _Handler.hits.clear()
    yield f"http://127.0.0.1:{srv.server_port}" + "/{symbol}/{start}/{end}"
    srv.shutdown()
    srv.server_close()


def test_fetch_concatenates_and_caches(server, tmp_path):
    data = fetch_remote_csv(server, ["AAA", "BBB"], "2020-01-01", "2020-01-02", cache_dir=tmp_path)
    lines = data.decode().splitlines()
    assert lines[0] == "date,ticker,close" and len(lines) == 5
    assert cache_path(tmp_path, server, "AAA", "2020-01-01", "2020-01-02").is_file()
    assert len(_Handler.hits) == 2
    again = fetch_remote_csv(server, ["AAA", "BBB"], "2020-01-01", "2020-01-02", cache_dir=tmp_path)
    assert again == data and len(_Handler.hits) == 2


def test_http_error_status(server, tmp_path):
    with pytest.raises(TransportError) as exc:
        fetch_remote_csv(server, "BAD", "2020-01-01", "2020-01-02", cache_dir=tmp_path)
    assert exc.value.status == 503
    assert not list(tmp_path.glob("BAD*"))


def test_offline(tmp_path):
    url = "http://127.0.0.1:9/{symbol}"  # discard port: connection refused
    with pytest.raises(OfflineError):
        fetch_remote_csv(url, "AAA", "a", "b", cache_dir=tmp_path, timeout=2)
