"""The simulated Internet behind the exits: decoy hosts and attacker scripts."""

import asyncio
import enum
import hashlib
import logging
import random
import re
from dataclasses import dataclass, field

from exitscan import sshproto, tlsio
from exitscan.simnet import certs

log = logging.getLogger(__name__)


class InvalidConfig(ValueError):
    pass


class BehaviorKind(str, enum.Enum):
    BENIGN = "benign"
    CERT_MITM = "cert_mitm"
    SSLSTRIP = "sslstrip"
    HTML_INJECT = "html_inject"
    SSH_MITM = "ssh_mitm"
    DNS_POISON = "dns_poison"
    DNS_CATEGORY_BLOCK = "dns_category_block"
    DESTROY_CIRCUITS = "destroy_circuits"


# Markup injected by the Taiwanese relay, verbatim.
INJECTED_MARKUP = '<br>\n<img src="http://111.251.157.184/pics.cgi"\n width="1" height="1">\n'

GFW_POISON = {
    "torproject.decoy": "203.0.113.37",
    "facebook.decoy": "203.0.113.38",
    "youtube.decoy": "203.0.113.39",
}
GOVERNMENT_BLOCK_IP = "192.0.2.80"
OPENDNS_BLOCK_IP = "192.0.2.146"


def default_payload(kind):
    kind = BehaviorKind(kind)
    if kind is BehaviorKind.HTML_INJECT:
        return {"markup": INJECTED_MARKUP}
    if kind is BehaviorKind.DNS_POISON:
        return {"poison": dict(GFW_POISON)}
    if kind is BehaviorKind.DNS_CATEGORY_BLOCK:
        return {"categories": ["pornography"], "block_ip": GOVERNMENT_BLOCK_IP}
    if kind is BehaviorKind.CERT_MITM:
        return {"chain": "main-authority"}
    return {}


@dataclass
class ExitBehavior:
    """What one exit does to traffic.  An exit may carry several behaviors.

    ``refetch_mode`` decides how repeated connections are sampled:
    ``independent`` draws afresh for every connection, ``sticky`` reuses the
    first decision for the same circuit and destination.
    """

    exit_fp: str
    kind: BehaviorKind = BehaviorKind.BENIGN
    sampling_rate: float = 1.0
    target_filter: frozenset = None
    payload: dict = None
    refetch_mode: str = "independent"

    def __post_init__(self):
        self.kind = BehaviorKind(self.kind)
        self.exit_fp = self.exit_fp.lstrip("$").upper()
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise InvalidConfig("sampling_rate %r outside [0, 1]" % self.sampling_rate)
        if self.target_filter is not None:
            self.target_filter = frozenset(self.target_filter)
            if not self.target_filter:
                raise InvalidConfig("target_filter must be non-empty when present")
        if self.payload is None:
            self.payload = default_payload(self.kind)
        if self.refetch_mode not in ("independent", "sticky"):
            raise InvalidConfig("refetch_mode must be 'independent' or 'sticky'")

    def covers(self, host, port=None):
        if self.target_filter is None:
            return True
        return host in self.target_filter or ("%s:%s" % (host, port)) in self.target_filter

    def to_dict(self):
        out = {"exit_fp": self.exit_fp, "kind": self.kind.value, "sampling_rate": self.sampling_rate}
        if self.target_filter is not None:
            out["target_filter"] = sorted(self.target_filter)
        if self.payload != default_payload(self.kind):
            out["payload"] = self.payload
        if self.refetch_mode != "independent":
            out["refetch_mode"] = self.refetch_mode
        return out


def script_refetch_semantics(behavior):
    """Make every TLS connection through the exit an independent draw.

    A browser re-fetching a certificate opens a new connection; an attacker
    sampling connections therefore wins both with probability p*p.
    """
    if behavior.kind is not BehaviorKind.CERT_MITM:
        raise InvalidConfig("re-fetch semantics only apply to cert_mitm behaviors")
    behavior.refetch_mode = "independent"


# -- the decoy Internet ------------------------------------------------------

HOSTS = {
    "secure.decoy": ("198.18.0.10",),
    "selfsigned.decoy": ("198.18.0.11",),
    "social.decoy": ("198.18.0.12",),
    "search.decoy": ("198.18.0.13",),
    "video.decoy": ("198.18.0.14", "198.18.0.24"),
    "mail.decoy": ("198.18.0.15",),
    "news.decoy": ("198.18.0.16",),
    "login.decoy": ("198.18.0.20",),
    "ssh.decoy": ("198.18.0.22",),
    "echo.decoy": ("198.18.0.7",),
    "bank.decoy": ("198.18.1.30", "198.18.1.31"),
    "activism.decoy": ("198.18.1.40",),
    "adult.decoy": ("198.18.1.50",),
    "torproject.decoy": ("198.18.1.60",),
    "facebook.decoy": ("198.18.1.61",),
    "youtube.decoy": ("198.18.1.62", "198.18.1.63"),
    "example.decoy": ("198.18.1.70",),
}

CATEGORIES = {
    "bank.decoy": "finance",
    "social.decoy": "social",
    "facebook.decoy": "social",
    "activism.decoy": "activism",
    "adult.decoy": "pornography",
}

HTTPS_HOSTS = ("secure.decoy", "social.decoy", "search.decoy", "video.decoy", "mail.decoy",
               "news.decoy", "facebook.decoy", "youtube.decoy", "torproject.decoy")

LOGIN_PAGE = """<!DOCTYPE html>
<HTML>
<HEAD>
<TITLE>Decoy Login</TITLE>
<script src="https://secure.decoy/static/app.js"></script>
</HEAD>
<BODY>
<h1>Sign in</h1>
<form action="https://login.decoy/session" method="post">
<input name="user"> <input name="password" type="password">
</form>
<p><a href="https://secure.decoy/account">Your account</a>
<a href="https://secure.decoy/help">Help</a>
<a href="http://news.decoy/">News</a></p>
</BODY>
</HTML>
"""

LOGIN_LINKS = ("https://secure.decoy/static/app.js", "https://login.decoy/session",
               "https://secure.decoy/account", "https://secure.decoy/help")

BLOCK_PAGE = "<HTML><BODY>Access to this site has been blocked.</BODY></HTML>\n"
SINKHOLE_PAGE = "<HTML><BODY></BODY></HTML>\n"


def _services():
    services = {}
    for host in HTTPS_HOSTS:
        for ip in HOSTS[host]:
            services[(ip, 443)] = ("https", host, "decoy")
            services[(ip, 80)] = ("http", host)
    services[(HOSTS["selfsigned.decoy"][0], 443)] = ("https", "selfsigned.decoy", "self")
    services[(HOSTS["login.decoy"][0], 80)] = ("http", "login.decoy")
    services[(HOSTS["ssh.decoy"][0], 22)] = ("ssh", "ssh.decoy")
    services[(HOSTS["echo.decoy"][0], 7)] = ("echo", "echo.decoy")
    for ip in GFW_POISON.values():
        services[(ip, 80)] = ("http", "sinkhole")
        services[(ip, 443)] = ("https", "sinkhole", "self")
    for ip in (GOVERNMENT_BLOCK_IP, OPENDNS_BLOCK_IP):
        services[(ip, 80)] = ("http", "blocked")
    return services


SERVICES = _services()


def http_page(host, path):
    """Status and body the genuine web server returns."""
    if host == "login.decoy" and path in ("/", "/index.html"):
        return 200, LOGIN_PAGE
    if host == "blocked":
        return 200, BLOCK_PAGE
    if host == "sinkhole":
        return 200, SINKHOLE_PAGE
    return 404, "<HTML><BODY>not found</BODY></HTML>\n"


def http_response(status, body, content_type="text/html"):
    reason = {200: "OK", 404: "Not Found"}.get(status, "OK")
    raw = body.encode("utf-8")
    head = ("HTTP/1.1 %d %s\r\nServer: Apache/2.2.22 (Ubuntu)\r\nContent-Type: %s\r\n"
            "Content-Length: %d\r\nConnection: close\r\n\r\n" % (status, reason, content_type, len(raw)))
    return head.encode("ascii") + raw


async def read_http_request(reader, limit=65536):
    head = b""
    while b"\r\n\r\n" not in head:
        chunk = await reader.read(4096)
        if not chunk:
            break
        head += chunk
        if len(head) > limit:
            break
    line = head.split(b"\r\n", 1)[0].decode("latin-1")
    parts = line.split()
    path = parts[1] if len(parts) >= 2 else "/"
    host = None
    for header in head.split(b"\r\n")[1:]:
        name, _, value = header.decode("latin-1").partition(":")
        if name.strip().lower() == "host":
            host = value.strip().split(":")[0]
    return path, host


_CLOSE_HTML = re.compile(r"</html\s*>", re.I)


def inject_markup(body, markup):
    """Insert ``markup`` right in front of the last closing HTML tag."""
    matches = list(_CLOSE_HTML.finditer(body))
    if not matches:
        return body + markup
    at = matches[-1].start()
    return body[:at] + markup + body[at:]


def strip_https(body):
    return body.replace("https://", "http://")


# -- per-exit agent ------------------------------------------------------------

class ExitAgent:
    """The scripted behavior of one exit relay.

    Every kind of decision draws from its own seeded stream, so the outcome
    of a connection depends only on the seed and on how many decisions of
    that kind the exit has made before.
    """

    def __init__(self, relay, behaviors, seed, log_attack=None):
        self.relay = relay
        self.fingerprint = relay.fingerprint
        self.behaviors = list(behaviors)
        self._seed = seed
        self._rngs = {}
        self._sticky = {}
        self._log_attack = log_attack

    def _rng(self, kind):
        rng = self._rngs.get(kind)
        if rng is None:
            rng = self._rngs[kind] = random.Random("%s/%s/%s" % (self._seed, self.fingerprint, kind))
        return rng

    def behavior(self, kind):
        for b in self.behaviors:
            if b.kind is kind:
                return b
        return None

    def decide(self, kind, host, port=None, circuit_id=None):
        """Whether the behavior ``kind`` tampers with this connection."""
        b = self.behavior(kind)
        if b is None or not b.covers(host, port):
            return False
        if b.sampling_rate >= 1.0:
            return True
        if b.sampling_rate <= 0.0:
            return False
        if b.refetch_mode == "sticky" and circuit_id is not None:
            key = (kind, circuit_id, host)
            if key not in self._sticky:
                self._sticky[key] = self._rng(kind).random() < b.sampling_rate
            return self._sticky[key]
        return self._rng(kind).random() < b.sampling_rate

    def destroys_circuit(self):
        return self.decide(BehaviorKind.DESTROY_CIRCUITS, "*")

    def _pick(self, name, addresses):
        # Load-balanced names: each exit sees a stable member of the set.
        digest = hashlib.sha1((self.fingerprint + name).encode()).digest()
        return addresses[digest[0] % len(addresses)]

    def resolve(self, name):
        """The A record this exit's resolver hands out, or None."""
        name = name.lower().rstrip(".")
        poison = self.behavior(BehaviorKind.DNS_POISON)
        if poison is not None and name in poison.payload.get("poison", {}):
            if self.decide(BehaviorKind.DNS_POISON, name):
                self._note(BehaviorKind.DNS_POISON, name)
                return poison.payload["poison"][name]
        block = self.behavior(BehaviorKind.DNS_CATEGORY_BLOCK)
        if block is not None and CATEGORIES.get(name) in block.payload.get("categories", ()):
            if self.decide(BehaviorKind.DNS_CATEGORY_BLOCK, name):
                self._note(BehaviorKind.DNS_CATEGORY_BLOCK, name)
                return block.payload.get("block_ip", GOVERNMENT_BLOCK_IP)
        addresses = HOSTS.get(name)
        if not addresses:
            return None
        return self._pick(name, addresses)

    def _note(self, kind, target):
        if self._log_attack is not None:
            self._log_attack(self.fingerprint, kind.value, target)

    async def serve(self, host, port, ip, reader, writer, circuit_id=None):
        """Handle an exiting stream whose destination answered."""
        service = SERVICES.get((ip, port))
        if service is None:
            return
        try:
            if service[0] == "https":
                await self._serve_https(service, host, port, reader, writer, circuit_id)
            elif service[0] == "http":
                await self._serve_http(service, host, port, reader, writer, circuit_id)
            elif service[0] == "ssh":
                await self._serve_ssh(host, port, reader, writer, circuit_id)
            elif service[0] == "echo":
                writer.write(("EXIT %s\n" % self.fingerprint).encode("ascii"))
                while True:
                    data = await reader.read(4096)
                    if not data:
                        break
                    writer.write(data)
        except (ConnectionError, asyncio.IncompleteReadError, tlsio.HandshakeError,
                sshproto.SshError) as err:
            log.debug("exit %s: stream to %s:%d ended: %s", self.fingerprint[:8], host, port, err)

    async def _serve_https(self, service, host, port, reader, writer, circuit_id):
        _, real_host, kind = service
        if self.decide(BehaviorKind.CERT_MITM, host, port, circuit_id):
            self._note(BehaviorKind.CERT_MITM, "%s:%d" % (host, port))
            ctx = certs.server_context("mitm", host)
        else:
            ctx = certs.server_context(kind, real_host)
        channel = await tlsio.server_handshake(reader, writer, ctx)
        # Serve one request if the client sends one; scanners usually hang up.
        request = await channel.read()
        if request:
            await channel.write(http_response(200, "<HTML><BODY>%s</BODY></HTML>\n" % real_host))

    async def _serve_http(self, service, host, port, reader, writer, circuit_id):
        path, _ = await read_http_request(reader)
        status, body = http_page(service[1], path)
        if status == 200 and service[1] not in ("blocked", "sinkhole"):
            if self.decide(BehaviorKind.SSLSTRIP, host, port, circuit_id):
                self._note(BehaviorKind.SSLSTRIP, "%s:%d" % (host, port))
                body = strip_https(body)
            if self.decide(BehaviorKind.HTML_INJECT, host, port, circuit_id):
                self._note(BehaviorKind.HTML_INJECT, "%s:%d" % (host, port))
                body = inject_markup(body, self.behavior(BehaviorKind.HTML_INJECT).payload["markup"])
        writer.write(http_response(status, body))
        await writer.drain()

    async def _serve_ssh(self, host, port, reader, writer, circuit_id):
        if self.decide(BehaviorKind.SSH_MITM, host, port, circuit_id):
            self._note(BehaviorKind.SSH_MITM, "%s:%d" % (host, port))
            key = certs.load_key("attacker_ssh_host.key")
        else:
            key = certs.load_key("decoy_ssh_host.key")
        await sshproto.serve_host_key(reader, writer, key)


def default_decoys():
    """Scanner expectations matching the decoy world (see data/decoys.json)."""
    dns = {name: sorted(HOSTS[name]) for name in
           ("bank.decoy", "social.decoy", "activism.decoy", "adult.decoy",
            "torproject.decoy", "facebook.decoy", "youtube.decoy", "example.decoy")}
    return {
        "https": {"target": "secure.decoy:443",
                  "cert_sha1": certs.sha1_hex(certs.decoy_leaf("secure.decoy"))},
        "sslstrip": {"target": "login.decoy:80", "path": "/",
                     "https_links": list(LOGIN_LINKS)},
        "ssh": {"target": "ssh.decoy:22",
                "ssh_key_fp": sshproto.sha256_fingerprint(
                    sshproto.host_key_blob(certs.load_key("decoy_ssh_host.key")))},
        "dns": {"dns_map": dns},
        "https_targets": {"%s:443" % host: certs.sha1_hex(certs.decoy_leaf(host))
                          for host in HTTPS_HOSTS},
    }
