"""Best-effort CSV download with a local cache. Offline CSV files remain the contract."""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
import urllib.error
import urllib.request
from pathlib import Path

from filelock import FileLock

from .errors import OfflineError, TransportError

CACHE_ENV = "PRUDEX_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "prudex"))


def cache_path(cache_dir, endpoint: str, symbol: str, start: str, end: str) -> Path:
    key = hashlib.sha256(f"{endpoint}\n{symbol}\n{start}\n{end}".encode()).hexdigest()[:12]
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", symbol)
    return Path(cache_dir) / f"{safe}_{start}_{end}_{key}.csv"


def _download(url: str, timeout: float) -> bytes:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        body = exc.read().decode("utf-8", "replace").strip()
        raise TransportError(f"HTTP {exc.code} for {url}: {body}", status=exc.code) from exc
    except (urllib.error.URLError, OSError) as exc:
        raise OfflineError(
            f"cannot reach {url} ({exc}); no cached copy exists. "
            "Download the CSV manually and pass it as a local file instead."
        ) from exc


def fetch_remote_csv(endpoint: str, symbols, start: str, end: str, cache_dir=None,
                     timeout: float = 30.0) -> bytes:
    """Fetch long-format CSV for each symbol and concatenate under one header.

    ``endpoint`` is a URL template with ``{symbol}``, ``{start}`` and
    ``{end}`` fields. Every response is cached per (endpoint, symbol, range);
    cached entries are served without touching the network.
    """
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cache_dir / ".lock"))
    if isinstance(symbols, str):
        symbols = [symbols]
    header, body = None, []
    for symbol in symbols:
        path = cache_path(cache_dir, endpoint, symbol, start, end)
        if path.exists():
            data = path.read_bytes()
        else:
            data = _download(endpoint.format(symbol=symbol, start=start, end=end), timeout)
            with lock:
                fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".part")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
        lines = data.decode("utf-8-sig").splitlines()
        if not lines:
            continue
        if header is None:
            header = lines[0]
        body.extend(line for line in lines[1:] if line.strip())
    if header is None:
        return b""
    return ("\n".join([header, *body]) + "\n").encode()
