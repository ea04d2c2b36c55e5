"""Declarative simulator configuration (JSON) and its validation."""

import json
from dataclasses import asdict
from importlib import resources

import jsonschema

from exitscan.consensus import ExitPolicySummary, RelayDescriptor
from exitscan.simnet import fixtures
from exitscan.simnet.daemon import ClientPolicy, FaultTable, LatencyModel, SimConfig
from exitscan.simnet.world import ExitBehavior, InvalidConfig

BUILTIN_FIXTURES = {
    "table1": fixtures.table1_config,
    "small": fixtures.small_config,
}


def _schema():
    return json.loads(resources.files("exitscan").joinpath("schema", "simconfig.schema.json").read_text())


def relay_to_dict(relay):
    out = {"nickname": relay.nickname, "fingerprint": relay.fingerprint, "address": relay.address,
           "or_port": relay.or_port, "flags": sorted(relay.flags), "bandwidth": relay.bandwidth,
           "exit_policy": str(relay.exit_policy)}
    if relay.country:
        out["country"] = relay.country
    return out


def relay_from_dict(data):
    return RelayDescriptor(data["nickname"], data["fingerprint"].upper(), data["address"],
                           data.get("or_port", 9001), frozenset(data.get("flags", ())),
                           data.get("bandwidth", 0),
                           ExitPolicySummary.parse(data.get("exit_policy", "reject 1-65535")),
                           data.get("country"))


def config_to_dict(config):
    """Fully expanded form: relays and behaviors are always listed."""
    out = {
        "rng_seed": config.rng_seed,
        "relays": [relay_to_dict(r) for r in config.relays],
        "behaviors": [b.to_dict() for fp in sorted(config.behaviors) for b in config.behaviors[fp]],
        "latency": asdict(config.latency),
        "faults": {"fail_prob": config.faults.fail_prob,
                   "destroy_fraction": config.faults.destroy_fraction,
                   "block": config.faults.block,
                   "reject_conf": list(config.faults.reject_conf)},
        "client": {"exit_choice": config.client.exit_choice, "exits": list(config.client.exits)},
        "build_timeout": config.build_timeout,
        "stream_timeout": config.stream_timeout,
    }
    if config.cookie is not None:
        out["cookie"] = config.cookie.hex()
    return out


def config_from_dict(data):
    """Build a SimConfig; raises InvalidConfig naming the offending field."""
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise InvalidConfig("simulator config at %s: %s" % (where, err.message)) from None
    common = {}
    if "latency" in data:
        common["latency"] = LatencyModel(**data["latency"])
    if "faults" in data:
        common["faults"] = FaultTable(**data["faults"])
    if "client" in data:
        common["client"] = ClientPolicy(**data["client"])
    if "cookie" in data:
        common["cookie"] = bytes.fromhex(data["cookie"])
    for key in ("build_timeout", "stream_timeout"):
        if key in data:
            common[key] = data[key]
    seed = data.get("rng_seed", 0)
    try:
        if "fixture" in data:
            params = dict(data["fixture"])
            name = params.pop("name")
            if "bad" in params:
                params["bad"] = {int(k): v for k, v in params["bad"].items()}
            config = BUILTIN_FIXTURES[name](seed=seed, **params, **common)
        else:
            config = SimConfig([relay_from_dict(r) for r in data["relays"]], rng_seed=seed, **common)
        for item in data.get("behaviors", ()):
            b = ExitBehavior(**item)
            config.behaviors.setdefault(b.exit_fp, [])
            config.behaviors[b.exit_fp] = [x for x in config.behaviors[b.exit_fp] if x.kind is not b.kind]
            config.behaviors[b.exit_fp].append(b)
        return config.validate()
    except (TypeError, ValueError) as err:
        if isinstance(err, InvalidConfig):
            raise
        raise InvalidConfig("simulator config: %s" % err) from None


def load_config(source):
    """Read a SimConfig from a path, a JSON string, or a builtin fixture name."""
    if isinstance(source, dict):
        return config_from_dict(source)
    if source in BUILTIN_FIXTURES:
        return config_from_dict({"fixture": {"name": source}})
    if source.lstrip().startswith("{"):
        text, origin = source, "<string>"
    else:
        with open(source) as fh:
            text, origin = fh.read(), source
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        line = text.splitlines()[err.lineno - 1] if err.lineno <= len(text.splitlines()) else ""
        raise InvalidConfig("%s:%d:%d: %s\n    %s" % (origin, err.lineno, err.colno, err.msg, line)) from None
    return config_from_dict(data)


def dump_config(config, path=None):
    text = json.dumps(config_to_dict(config), indent=1, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
