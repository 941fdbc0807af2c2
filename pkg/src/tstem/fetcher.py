"""HTTP(S) retrieval with proxy routing for onion hosts, plus HTML-to-text
extraction feeding the classifier.

Onion hosts are only ever reached through the configured SOCKS5 proxy with
remote hostname resolution; a missing proxy is a configuration error raised
before any network I/O.
"""

from __future__ import annotations

import socket
import ssl
import struct
import time
from dataclasses import dataclass, field
from datetime import datetime
from html.parser import HTMLParser
from http.client import HTTPConnection, HTTPSConnection
from typing import Optional
from urllib.parse import urljoin, urlsplit

import requests

from .core import utc_now
from .frontier import CrawlTask, is_onion


class FetchError(Exception):
    pass


class ConfigurationError(FetchError):
    pass


class TransientFetchError(FetchError):
    """Retryable: DNS failures, timeouts, connection resets, 5xx."""


class PermanentFetchError(FetchError):
    """Not retryable: 4xx, unsafe redirects, redirect loops."""


@dataclass(frozen=True)
class FetchConfig:
    socks_proxy: Optional[str] = None  # "host:port", SOCKS5 with remote DNS
    timeout_seconds: float = 30.0
    retries: int = 3
    body_cap_bytes: int = 2 * 1024 * 1024
    redirect_cap: int = 5
    user_agent: str = "tstem/0.1"
    backoff_base_seconds: float = 0.5


@dataclass(frozen=True)
class RawResponse:
    status: int
    headers: dict[str, str]
    body: bytes
    truncated: bool = False


@dataclass(frozen=True)
class FetchResult:
    task: CrawlTask
    status: int
    final_url: str
    body: bytes
    content_type: str
    fetched_at: datetime = field(default_factory=utc_now)
    elapsed_ms: float = 0.0
    truncated: bool = False


# ---------------------------------------------------------------------------
# transports

def _socks5_connect(proxy: str, host: str, port: int, timeout: float) -> socket.socket:
    """Open a SOCKS5 tunnel, passing the hostname to the proxy so the onion
    name is never resolved locally."""
    proxy_host, _, proxy_port = proxy.rpartition(":")
    sock = socket.create_connection((proxy_host, int(proxy_port)), timeout=timeout)
    try:
        sock.sendall(b"\x05\x01\x00")  # version 5, one method: no auth
        ver, method = sock.recv(2)
        if ver != 5 or method != 0:
            raise TransientFetchError(f"SOCKS5 handshake rejected by {proxy}")
        name = host.encode("idna") if any(ord(c) > 127 for c in host) else host.encode("ascii")
        sock.sendall(b"\x05\x01\x00\x03" + bytes([len(name)]) + name + struct.pack(">H", port))
        reply = sock.recv(4)
        if len(reply) < 4 or reply[1] != 0:
            code = reply[1] if len(reply) > 1 else -1
            raise TransientFetchError(f"SOCKS5 connect to {host}:{port} failed (code {code})")
        # drain the bound-address tail of the reply
        atyp = reply[3]
        if atyp == 3:
            tail = sock.recv(1)[0]
        else:
            tail = {1: 4, 4: 16}.get(atyp, 0)
        sock.recv(tail + 2)
        return sock
    except (OSError, IndexError) as exc:
        sock.close()
        raise TransientFetchError(f"SOCKS5 tunnel via {proxy} failed: {exc}") from exc


class DefaultTransport:
    """Direct fetches via requests; proxied fetches via a raw SOCKS5 tunnel."""

    def __init__(self):
        self._session = requests.Session()

    def get(self, url: str, *, headers: dict[str, str], timeout: float,
            cap: int, proxy: Optional[str] = None) -> RawResponse:
        if proxy is None:
            return self._direct(url, headers, timeout, cap)
        return self._via_socks(url, headers, timeout, cap, proxy)

    def _direct(self, url, headers, timeout, cap) -> RawResponse:
        try:
            resp = self._session.get(url, headers=headers, timeout=timeout,
                                     allow_redirects=False, stream=True)
        except requests.RequestException as exc:
            raise TransientFetchError(f"GET {url} failed: {exc}") from exc
        body = b""
        truncated = False
        try:
            for chunk in resp.iter_content(chunk_size=65536):
                body += chunk
                if len(body) > cap:
                    body = body[:cap]
                    truncated = True
                    break
        except requests.RequestException as exc:
            raise TransientFetchError(f"read of {url} failed: {exc}") from exc
        finally:
            resp.close()
        return RawResponse(status=resp.status_code,
                           headers={k.lower(): v for k, v in resp.headers.items()},
                           body=body, truncated=truncated)

    def _via_socks(self, url, headers, timeout, cap, proxy) -> RawResponse:
        parts = urlsplit(url)
        host = parts.hostname or ""
        port = parts.port or (443 if parts.scheme == "https" else 80)
        sock = _socks5_connect(proxy, host, port, timeout)
        try:
            if parts.scheme == "https":
                ctx = ssl.create_default_context()
                # onion services authenticate via the address itself
                if host.endswith(".onion"):
                    ctx.check_hostname = False
                    ctx.verify_mode = ssl.CERT_NONE
                sock = ctx.wrap_socket(sock, server_hostname=host)
                conn = HTTPSConnection(host, port, timeout=timeout)
            else:
                conn = HTTPConnection(host, port, timeout=timeout)
            conn.sock = sock
            path = parts.path or "/"
            if parts.query:
                path += "?" + parts.query
            conn.request("GET", path, headers=headers)
            resp = conn.getresponse()
            body = resp.read(cap + 1)
            truncated = len(body) > cap
            return RawResponse(status=resp.status,
                               headers={k.lower(): v for k, v in resp.getheaders()},
                               body=body[:cap], truncated=truncated)
        except (OSError, ssl.SSLError) as exc:
            raise TransientFetchError(f"proxied GET {url} failed: {exc}") from exc
        finally:
            sock.close()


# ---------------------------------------------------------------------------
# fetch

def fetch(task: CrawlTask, config: FetchConfig,
          transport=None, sleep=time.sleep) -> FetchResult:
    """Retrieve one task with redirects, retries and the onion-safety rule."""
    if is_onion(task.url) and config.socks_proxy is None:
        raise ConfigurationError(
            f"{task.url}: onion host but no SOCKS5 proxy configured")
    if transport is None:
        transport = DefaultTransport()
    headers = {"User-Agent": config.user_agent, "Accept": "*/*"}

    last_error: Optional[Exception] = None
    for attempt in range(config.retries + 1):
        if attempt:
            sleep(config.backoff_base_seconds * 2 ** (attempt - 1))
        started = time.monotonic()
        try:
            url = task.url
            for _ in range(config.redirect_cap + 1):
                proxy = config.socks_proxy if is_onion(url) else None
                if is_onion(url) and proxy is None:
                    raise ConfigurationError(f"{url}: onion redirect without proxy")
                raw = transport.get(url, headers=headers,
                                    timeout=config.timeout_seconds,
                                    cap=config.body_cap_bytes, proxy=proxy)
                if raw.status in (301, 302, 303, 307, 308):
                    location = raw.headers.get("location")
                    if not location:
                        raise PermanentFetchError(f"{url}: redirect without Location")
                    target = urljoin(url, location)
                    if is_onion(url) and not is_onion(target):
                        raise PermanentFetchError(
                            f"{url}: redirect escapes onion space to {target}")
                    url = target
                    continue
                break
            else:
                raise PermanentFetchError(f"{task.url}: more than "
                                          f"{config.redirect_cap} redirects")
            if 400 <= raw.status < 500:
                raise PermanentFetchError(f"{url}: HTTP {raw.status}")
            if raw.status >= 500:
                raise TransientFetchError(f"{url}: HTTP {raw.status}")
            elapsed_ms = (time.monotonic() - started) * 1000.0
            return FetchResult(
                task=task, status=raw.status, final_url=url, body=raw.body,
                content_type=raw.headers.get("content-type", ""),
                elapsed_ms=elapsed_ms, truncated=raw.truncated)
        except TransientFetchError as exc:
            last_error = exc
            continue
    raise last_error if last_error else TransientFetchError(f"{task.url}: fetch failed")


# ---------------------------------------------------------------------------
# text extraction

class _TextParser(HTMLParser):
    _SKIP = {"script", "style", "noscript", "template"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skip_depth += 1

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)


def extract_text(body: bytes, content_type: str) -> Optional[str]:
    """Strip tags/scripts/styles, decode entities, collapse whitespace.

    Plain text passes through; unsupported content types return None as the
    skip signal (callers count it) rather than raising.
    """
    mime = content_type.split(";")[0].strip().lower()
    charset = "utf-8"
    for param in content_type.split(";")[1:]:
        name, _, value = param.strip().partition("=")
        if name.lower() == "charset" and value:
            charset = value.strip("\"'")
    try:
        text = body.decode(charset, errors="replace")
    except LookupError:
        text = body.decode("utf-8", errors="replace")

    if mime in ("text/plain", ""):
        return " ".join(text.split())
    if mime in ("text/html", "application/xhtml+xml"):
        parser = _TextParser()
        try:
            parser.feed(text)
            parser.close()
        except Exception:
            pass  # keep whatever text was collected from broken markup
        return " ".join("".join(parser.parts).split())
    return None
