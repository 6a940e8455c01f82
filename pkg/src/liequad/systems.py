"""System files: JSON definitions of a domain, a frame and the dynamical field."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Any

from .expr import Context, ExprDomainError, ParseError, evaluate, parse, to_str
from .vfield import Domain, Frame, SystemDef, VectorField

SCHEMA = "liequad-system/1"
MODES = ("auto", "lie", "distributional")


class SystemFileError(ValueError):
    pass


def _require(cond: bool, message: str):
    if not cond:
        raise SystemFileError(message)


def _field_items(raw) -> list[tuple[str, list]]:
    if isinstance(raw, dict):
        return list(raw.items())
    if isinstance(raw, list):
        out = []
        for item in raw:
            _require(isinstance(item, dict) and "name" in item and "components" in item,
                     "each field entry needs 'name' and 'components'")
            out.append((item["name"], item["components"]))
        return out
    raise SystemFileError("'fields' must be an object or a list")


def system_from_dict(data: dict[str, Any]) -> SystemDef:
    """Validate a parsed system file and build the SystemDef."""
    _require(isinstance(data, dict), "system file must be a JSON object")
    schema = data.get("schema", SCHEMA)
    _require(schema == SCHEMA, f"unsupported schema {schema!r}")
    variables = data.get("variables")
    _require(isinstance(variables, list) and variables and all(isinstance(v, str) for v in variables),
             "'variables' must be a non-empty list of names")
    n = data.get("dimension", len(variables))
    _require(n == len(variables), "'dimension' does not match the number of variables")
    params = data.get("parameters", {}) or {}
    _require(isinstance(params, dict), "'parameters' must be an object")
    try:
        params = {str(k): float(v) for k, v in params.items()}
        ctx = Context(tuple(variables), params)
    except (TypeError, ValueError) as exc:
        raise SystemFileError(str(exc)) from None
    dom = data.get("domain")
    _require(isinstance(dom, dict) and "box" in dom and "x0" in dom, "'domain' needs 'box' and 'x0'")
    box = dom["box"]
    _require(isinstance(box, list) and len(box) == n and all(isinstance(b, list) and len(b) == 2 for b in box),
             "'box' must list one [lo, hi] pair per variable")
    _require(isinstance(dom["x0"], list) and len(dom["x0"]) == n, "'x0' must have one entry per variable")
    try:
        domain = Domain(tuple(tuple(b) for b in box), tuple(dom["x0"]),
                        int(dom.get("samples", 64)), int(dom.get("seed", 0)))
    except (TypeError, ValueError) as exc:
        raise SystemFileError(str(exc)) from None
    fields = []
    for name, comps in _field_items(data.get("fields")):
        _require(isinstance(comps, list) and len(comps) == n,
                 f"field {name!r} must have {n} components")
        exprs = []
        for k, text in enumerate(comps):
            _require(isinstance(text, (str, int, float)), f"field {name!r} component {k} is not a string")
            try:
                exprs.append(parse(str(text), ctx))
            except ParseError as exc:
                raise SystemFileError(f"field {name!r} component {k}: {exc}") from None
        fields.append(VectorField(tuple(exprs), str(name)))
    _require(fields, "no fields given")
    names = [f.name for f in fields]
    _require(len(set(names)) == len(names), "field names must be unique")
    dyn = data.get("dynamics", names[0])
    _require(dyn in names, f"dynamics {dyn!r} is not a declared field")
    mode = data.get("mode", "auto")
    _require(mode in MODES, f"mode must be one of {MODES}")
    for f in fields:
        for k, c in enumerate(f.components):
            try:
                evaluate(c, domain.x0)
            except ExprDomainError as exc:
                raise SystemFileError(f"field {f.name!r} component {k} undefined at x0: {exc}") from None
    frame = Frame(tuple(fields), domain)
    return SystemDef(domain, frame, names.index(dyn), tuple(variables), params,
                     str(data.get("name", "")), mode)


def system_to_dict(system: SystemDef) -> dict[str, Any]:
    d = system.domain
    return {
        "schema": SCHEMA,
        "name": system.name,
        "dimension": system.n,
        "variables": list(system.variables),
        "parameters": dict(system.parameters),
        "domain": {"box": [list(b) for b in d.box], "x0": list(d.x0),
                   "samples": d.samples, "seed": d.seed},
        "fields": {f.name: [to_str(c) for c in f.components] for f in system.frame.fields},
        "dynamics": system.gamma.name,
        "mode": system.mode,
    }


def load_system(source) -> SystemDef:
    """Load from a path, a JSON string, a dict, or the name of a bundled system."""
    if isinstance(source, dict):
        return system_from_dict(source)
    text = None
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        if path.exists():
            text = path.read_text()
        elif str(source) in bundled_systems():
            text = bundled_text(str(source))
        else:
            raise SystemFileError(f"no such system file: {source}")
    else:
        text = source
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemFileError(f"invalid JSON: {exc}") from None
    return system_from_dict(data)


def bundled_systems() -> list[str]:
    root = resources.files("liequad") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_text(name: str) -> str:
    return (resources.files("liequad") / "data" / f"{name}.json").read_text()


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("liequad") / "data" / f"{name}.json"))


def with_overrides(system: SystemDef, **changes) -> SystemDef:
    """Copy of a system with selected file fields replaced (e.g. domain, fields, dynamics)."""
    data = system_to_dict(system)
    for key, value in changes.items():
        if key in ("box", "x0", "samples", "seed"):
            data["domain"][key] = value
        else:
            data[key] = value
    return system_from_dict(data)
