"""sslstrip probe: fetch a decoy page over HTTP and check its HTTPS links.

Also catches markup slipped in between the closing body and html tags, the
spot a known injector used.
"""

import asyncio
import html.parser
import re

from exitscan.probes.base import ProbeResult, Verdict

MAX_BODY = 1 << 20
_LINK_ATTRS = {"a": "href", "link": "href", "area": "href", "form": "action",
               "script": "src", "img": "src", "iframe": "src", "frame": "src"}


class _LinkParser(html.parser.HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.links = []

    def handle_starttag(self, tag, attrs):
        wanted = _LINK_ATTRS.get(tag)
        for name, value in attrs:
            if name == wanted and value:
                self.links.append(value.strip())


def extract_links(body):
    parser = _LinkParser()
    parser.feed(body)
    parser.close()
    return parser.links


_BODY_END = re.compile(r"</body\s*>", re.I)
_HTML_END = re.compile(r"</html\s*>", re.I)


def find_injection(body):
    """Non-whitespace content between ``</body>`` and ``</html>``, if any."""
    body_end = list(_BODY_END.finditer(body))
    html_end = list(_HTML_END.finditer(body))
    if not body_end or not html_end:
        return None
    start, stop = body_end[-1].end(), html_end[-1].start()
    if stop <= start:
        return None
    excerpt = body[start:stop].strip()
    return excerpt or None


def compare_links(expected, found):
    """Split missing expected links into downgraded and otherwise absent."""
    found = set(found)
    missing = set(expected) - found
    downgraded = {u for u in missing if "http://" + u[len("https://"):] in found}
    return sorted(downgraded), sorted(missing - downgraded)


class HttpError(Exception):
    pass


async def _read_chunked(reader):
    body = b""
    while True:
        size_line = await reader.readline()
        if not size_line:
            raise HttpError("truncated chunked body")
        try:
            size = int(size_line.split(b";")[0].strip(), 16)
        except ValueError:
            raise HttpError("bad chunk size %r" % size_line) from None
        if size == 0:
            while (await reader.readline()) not in (b"\r\n", b"\n", b""):
                pass
            return body
        body += await reader.readexactly(size)
        await reader.readline()
        if len(body) > MAX_BODY:
            raise HttpError("body too large")


async def http_get(stream, host, path="/"):
    """Minimal HTTP/1.1 GET; returns (status, headers, body text)."""
    request = ("GET %s HTTP/1.1\r\nHost: %s\r\n"
               "User-Agent: Mozilla/5.0 (Windows NT 6.1; rv:24.0) Gecko/20100101 Firefox/24.0\r\n"
               "Accept: text/html,application/xhtml+xml,application/xml;q=0.9,*/*;q=0.8\r\n"
               "Accept-Language: en-US,en;q=0.5\r\nConnection: close\r\n\r\n" % (path, host))
    await stream.write(request.encode("ascii"))
    reader = stream.reader
    status_line = await reader.readline()
    parts = status_line.decode("latin-1").split(None, 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/") or not parts[1].isdigit():
        raise HttpError("bad status line %r" % status_line[:80])
    headers = {}
    while True:
        line = await reader.readline()
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.decode("latin-1").partition(":")
        headers[name.strip().lower()] = value.strip()
    if headers.get("transfer-encoding", "").lower() == "chunked":
        body = await _read_chunked(reader)
    elif "content-length" in headers:
        body = await reader.readexactly(min(int(headers["content-length"]), MAX_BODY))
    else:
        body = await reader.read(MAX_BODY)
    return int(parts[1]), headers, body.decode("utf-8", "replace")


async def probe_sslstrip(stream, spec, exit_fp=None):
    loop = asyncio.get_running_loop()
    started = loop.time()
    try:
        status, _, body = await http_get(stream, spec.target.host, spec.path)
    except (HttpError, ConnectionError, asyncio.IncompleteReadError, ValueError) as err:
        return ProbeResult(exit_fp, "sslstrip", Verdict.ERROR, duration=loop.time() - started,
                           error="fetch failed: %s" % err)
    if status != 200:
        return ProbeResult(exit_fp, "sslstrip", Verdict.ERROR, duration=loop.time() - started,
                           error="decoy page returned HTTP %d" % status)
    downgraded, missing = compare_links(spec.expectation.value, extract_links(body))
    injected = find_injection(body)
    kinds = []
    if downgraded or missing:
        kinds.append("sslstrip")
    if injected:
        kinds.append("html-injection")
    evidence = None
    if kinds:
        evidence = {"kind": ",".join(kinds), "downgraded": downgraded, "missing": missing,
                    "injected": injected}
    verdict = Verdict.ALERT if kinds else Verdict.OK
    return ProbeResult(exit_fp, "sslstrip", verdict, evidence=evidence, duration=loop.time() - started)
