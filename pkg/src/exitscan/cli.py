"""Command-line frontend.

Exit codes: 0 all clear (or MATCH), 2 an ALERT or MISMATCH, 3 verification
inconclusive, 1 anything operational (bad config, unreachable daemon, ...).
"""

import argparse
import asyncio
import json
import logging
import random
import sys
import uuid
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from exitscan import __version__, ctlproto
from exitscan.circuitmgr import CircuitManager, ScanAccounting
from exitscan.consensus import (CountryTable, ExitSelection, NoMatch, SelectionMode, parse_consensus,
                                select_exits)
from exitscan.endpoints import parse_endpoint
from exitscan.multipath import (ConsentRequired, FileSink, OutcomeStatus, SinkUnavailable, StreamTracker,
                                build_report, fetch_certificate, submit_report, verify_certificate)
from exitscan.probes import (DecoyConfigError, NoValidTrials, ProbeName, ProbeResult, Verdict,
                             estimate_sampling, load_decoys, rfc3339, specs_from_decoys)

log = logging.getLogger("exitscan")

EXIT_OK, EXIT_FAILURE, EXIT_ALERT, EXIT_INCONCLUSIVE = 0, 1, 2, 3


class ConfigError(Exception):
    pass


# -- report ---------------------------------------------------------------------

def report_schema():
    return json.loads(resources.files("exitscan").joinpath("schema", "scan_report.schema.json").read_text())


@dataclass
class ScanReport:
    selection: ExitSelection
    probes: list
    results: list = field(default_factory=list)
    accounting: ScanAccounting = field(default_factory=ScanAccounting)
    run_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    started_at: str = field(default_factory=rfc3339)
    finished_at: str = None
    tool_version: str = __version__
    exits_selected: int = 0

    @property
    def alerts(self):
        return [r for r in self.results if r.verdict is Verdict.ALERT]

    def to_dict(self):
        return {
            "run_id": self.run_id,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "selection": {"mode": self.selection.mode.value, "key": self.selection.key},
            "probes": list(self.probes),
            "exits_selected": self.exits_selected,
            "results": [r.to_dict() for r in self.results],
            "accounting": self.accounting.to_dict(),
            "tool_version": self.tool_version,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        jsonschema.validate(data, report_schema())
        sel = data["selection"]
        return cls(selection=ExitSelection(sel["mode"], sel.get("key")), probes=list(data["probes"]),
                   results=[ProbeResult.from_dict(r) for r in data["results"]],
                   accounting=ScanAccounting.from_dict(data["accounting"]), run_id=data["run_id"],
                   started_at=data["started_at"], finished_at=data["finished_at"],
                   tool_version=data["tool_version"], exits_selected=data["exits_selected"])


# -- configuration ----------------------------------------------------------------

def load_config_file(path):
    """JSON config with endpoints, first hops, decoys; errors carry line context."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("cannot read config %s: %s" % (path, err)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        lines = text.splitlines()
        line = lines[err.lineno - 1] if 0 < err.lineno <= len(lines) else ""
        raise ConfigError("%s:%d:%d: %s\n    %s\n    %s^" % (path, err.lineno, err.colno, err.msg,
                                                          line, " " * (err.colno - 1))) from None
    if not isinstance(data, dict):
        raise ConfigError("%s:1:1: config must be a JSON object" % path)
    known = {"control", "socks", "cookie", "first_hop", "decoys", "probe", "parallelism", "seed",
             "sim", "consensus", "sink", "trials", "max_retries"}
    for key in data:
        if key not in known:
            lineno = next((i + 1 for i, l in enumerate(text.splitlines()) if '"%s"' % key in l), 1)
            raise ConfigError("%s:%d: unknown setting %r" % (path, lineno, key))
    return data


def merge_config(args):
    """Flags win over the config file; returns a plain dict of settings."""
    settings = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "func", "command", "sim_command"):
            settings[key] = value
    return settings


def _first_hops(value):
    if value is None:
        return []
    if isinstance(value, str):
        value = value.split(",")
    return [fp.strip().lstrip("$").upper() for fp in value if fp.strip()]


def _probe_names(value):
    if value is None:
        return [p.value for p in ProbeName]
    names = value.split(",") if isinstance(value, str) else list(value)
    out = []
    for name in (n.strip().lower() for n in names):
        if name not in ProbeName._value2member_map_:
            raise ConfigError("unknown probe %r (choose from %s)" % (name, ", ".join(p.value for p in ProbeName)))
        out.append(name)
    return out


def _cookie(value):
    if value is None:
        return None
    try:
        return bytes.fromhex(value)
    except ValueError:
        return ctlproto.read_cookie(value)


class Environment:
    """Either a simulator in this process or a real daemon over TCP."""

    def __init__(self, settings):
        self.settings = settings
        self.sim = None
        if settings.get("sim"):
            from exitscan.simnet import load_config, start_sim
            from exitscan.simnet.fixtures import first_hops
            try:
                self.sim = load_config(settings["sim"])
            except (OSError, ValueError) as err:
                raise ConfigError(str(err)) from None
            if settings.get("force_sampling") is not None:
                for items in self.sim.behaviors.values():
                    for b in items:
                        b.sampling_rate = settings["force_sampling"]
            self._sim_first_hops = first_hops(self.sim)
            self._start_sim = start_sim

    def run(self, coro_fn):
        if self.sim is not None:
            from exitscan.simnet import run_virtual
            return run_virtual(coro_fn())
        return asyncio.run(coro_fn())

    def endpoints(self):
        """(control, socks, cookie, inspection)."""
        if self.sim is not None:
            control, socks, inspection = self._start_sim(self.sim)
            return control, socks, self.sim.cookie, inspection
        try:
            control = parse_endpoint(self.settings.get("control", "9051"))
            socks = parse_endpoint(self.settings.get("socks", "9050"))
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return control, socks, _cookie(self.settings.get("cookie")), None

    def first_hops(self, relays):
        hops = _first_hops(self.settings.get("first_hop"))
        if hops:
            return hops
        if self.sim is not None:
            return self._sim_first_hops
        guards = [r.fingerprint for r in relays if "Guard" in r.flags and not r.is_exit]
        if not guards:
            raise ConfigError("no first hop given and no guard relay in the consensus")
        return guards[:1]

    async def relays(self, session):
        path = self.settings.get("consensus")
        if self.sim is not None and not path:
            return list(self.sim.relays)
        if path:
            with open(path) as fh:
                document = fh.read()
        else:
            document = await session.get_info("ns/all")
        return parse_consensus(document, CountryTable.load())


def _selection(settings):
    if settings.get("exit"):
        return ExitSelection(SelectionMode.SINGLE, settings["exit"])
    if settings.get("country"):
        return ExitSelection(SelectionMode.COUNTRY, settings["country"])
    return ExitSelection(SelectionMode.ALL)


# -- subcommands -----------------------------------------------------------------

def cmd_scan(args):
    settings = merge_config(args)
    env = Environment(settings)
    selection = _selection(settings)
    probes = _probe_names(settings.get("probe"))
    decoys = load_decoys(settings.get("decoys"))
    specs = specs_from_decoys(decoys)
    missing = [p for p in probes if p not in specs]
    if missing:
        raise ConfigError("decoy config has no expectation for probe(s) %s" % ", ".join(missing))
    seed = settings.get("seed", 0)
    report = ScanReport(selection, probes)

    async def main():
        control, socks, cookie, _ = env.endpoints()
        session = await ctlproto.open_session(control, cookie)
        try:
            await ctlproto.configure_scanning(session)
            relays = await env.relays(session)
            exits = select_exits(relays, selection, seed, settings.get("include_bad_exits", False))
            report.exits_selected = len(exits)
            log.info("Scanning %d exit relays with %s.", len(exits), ",".join(probes))
            mgr = CircuitManager(session, socks, env.first_hops(relays))
            async with mgr:
                results, accounting = await mgr.run_scan(exits, [specs[p] for p in probes],
                                                         settings.get("parallelism", 10))
            report.results, report.accounting = results, accounting
        finally:
            await session.close()

    env.run(main)
    report.finished_at = rfc3339()
    text = report.to_json()
    jsonschema.validate(json.loads(text), report_schema())
    _emit(text, settings.get("out"))
    for r in report.alerts:
        log.warning("ALERT %s %s", r.probe, r.exit_fp)
    return EXIT_ALERT if report.alerts else EXIT_OK


def cmd_estimate(args):
    settings = merge_config(args)
    env = Environment(settings)
    exit_fp = settings["exit"].lstrip("$").upper()
    trials = settings.get("trials", 50)
    lo, hi = settings.get("sleep_range", (1.0, 5.0))
    specs = specs_from_decoys(load_decoys(settings.get("decoys")))
    rng = random.Random(settings.get("seed", 0))

    async def main():
        control, socks, cookie, _ = env.endpoints()
        session = await ctlproto.open_session(control, cookie)
        try:
            await ctlproto.configure_scanning(session)
            relays = await env.relays(session)
            exits = select_exits(relays, ExitSelection(SelectionMode.SINGLE, exit_fp), 0,
                                 include_bad_exits=True)
            relay = exits[0]
            async with CircuitManager(session, socks, env.first_hops(relays)) as mgr:
                return await estimate_sampling(lambda fp: mgr.probe_once(relay, specs["https"]),
                                               exit_fp, trials, (lo, hi), rng,
                                               settings.get("method", "clopper-pearson"))
        finally:
            await session.close()

    estimate = env.run(main)
    _emit(json.dumps(estimate.to_dict(), indent=1, sort_keys=True), settings.get("out"))
    return EXIT_OK


def cmd_verify(args):
    settings = merge_config(args)
    env = Environment(settings)
    target = settings["target"]
    consent = bool(settings.get("consent"))

    async def main():
        control, socks, cookie, _ = env.endpoints()
        session = await ctlproto.open_session(control, cookie)
        try:
            async with StreamTracker(session) as tracker:
                first = await fetch_certificate(tracker, socks, target)
                return await verify_certificate(session, socks, target, first,
                                                settings.get("max_retries", 3), tracker=tracker)
        finally:
            await session.close()

    outcome = env.run(main)
    out = outcome.to_dict()
    if outcome.status is OutcomeStatus.MISMATCH:
        report = build_report(outcome)
        if consent:
            out["receipt"] = submit_report(report, FileSink(settings.get("sink", "mitm-reports.jsonl")),
                                           consent=True)
        else:
            log.warning("Certificate mismatch; rerun with --consent to submit a report.")
    _emit(json.dumps(out, indent=1, sort_keys=True), settings.get("out"))
    return {OutcomeStatus.MATCH: EXIT_OK, OutcomeStatus.MISMATCH: EXIT_ALERT,
            OutcomeStatus.INCONCLUSIVE: EXIT_INCONCLUSIVE}[outcome.status]


def cmd_simnet_serve(args):
    from exitscan.simnet import load_config, serve_tcp
    config = load_config(args.sim)

    async def main():
        daemon, control, socks = await serve_tcp(config, args.control_port, args.socks_port, args.host)
        log.info("Simulator listening: control %s:%d, socks %s:%d", args.host, args.control_port,
                 args.host, args.socks_port)
        async with control, socks:
            await asyncio.gather(control.serve_forever(), socks.serve_forever())

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_simnet_export(args):
    from exitscan.simnet import dump_config, load_config
    config = load_config(args.sim)
    if args.force_sampling is not None:
        for items in config.behaviors.values():
            for b in items:
                b.sampling_rate = args.force_sampling
    _emit(dump_config(config).rstrip("\n"), args.out)
    return EXIT_OK


def _emit(text, path):
    if path and path != "-":
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# -- argument parsing ----------------------------------------------------------

def _sleep_range(text):
    lo, _, hi = text.partition(",")
    try:
        lo, hi = float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN,MAX seconds") from None
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 0 <= MIN <= MAX")
    return lo, hi


def _probability(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return value


def _common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--control", help="control port, host:port or port (default 9051)")
    p.add_argument("--socks", help="SOCKS port, host:port or port (default 9050)")
    p.add_argument("--cookie", help="control auth cookie, hex or file path")
    p.add_argument("--sim", help="run against the built-in simulator: 'table1', 'small' or a JSON file")
    p.add_argument("--force-sampling", type=_probability, help="simulator: override every sampling rate")
    p.add_argument("--consensus", help="read the consensus from a file instead of the daemon")
    p.add_argument("--decoys", help="decoy expectations (JSON); defaults to the bundled set")
    p.add_argument("--first-hop", help="comma-separated first-hop fingerprints")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write JSON here instead of stdout")


def build_parser():
    parser = argparse.ArgumentParser(prog="exitscan", description="Scan exit relays for tampering.")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="probe a set of exit relays")
    _common(p)
    which = p.add_mutually_exclusive_group()
    which.add_argument("--all", action="store_true", default=None)
    which.add_argument("--country", help="two-letter country code")
    which.add_argument("--exit", help="a single exit fingerprint")
    p.add_argument("--probe", help="comma-separated probes: https,sslstrip,ssh,dns (default all)")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--include-bad-exits", action="store_true", default=None)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("estimate", help="estimate an exit's HTTPS sampling rate")
    _common(p)
    p.add_argument("--exit", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--sleep-range", type=_sleep_range, help="MIN,MAX seconds between trials (default 1,5)")
    p.add_argument("--method", choices=("clopper-pearson", "wilson"))
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("verify", help="re-fetch a certificate over a second exit")
    _common(p)
    p.add_argument("--target", required=True, help="host:port")
    p.add_argument("--consent", action="store_true", default=None,
                   help="allow submitting a mismatch report to the sink")
    p.add_argument("--sink", help="report file (default mitm-reports.jsonl)")
    p.add_argument("--max-retries", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simnet", help="simulator utilities")
    simsub = p.add_subparsers(dest="sim_command", required=True)
    s = simsub.add_parser("serve", help="serve the simulator on TCP ports")
    s.add_argument("--sim", default="table1")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--control-port", type=int, default=19051)
    s.add_argument("--socks-port", type=int, default=19050)
    s.set_defaults(func=cmd_simnet_serve)
    s = simsub.add_parser("export-fixture", help="write a simulator config as JSON")
    s.add_argument("--sim", default="table1")
    s.add_argument("--force-sampling", type=_probability)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simnet_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NoMatch as err:
        print("NoMatch: %s" % err, file=sys.stderr)
    except (ConfigError, DecoyConfigError, ValueError) as err:
        print("config error: %s" % err, file=sys.stderr)
    except ConsentRequired as err:
        print(str(err), file=sys.stderr)
    except (ctlproto.ControlError, SinkUnavailable, NoValidTrials, OSError) as err:
        print("%s: %s" % (type(err).__name__, err), file=sys.stderr)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
