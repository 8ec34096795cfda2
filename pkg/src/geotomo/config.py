"""Config-file loading and numeric output writers.

One experiment is one structured text file with sections::

    [domain]
    dimension = 2
    rho = "1 - (x1^2 + x2^2)"       # rho > 0 inside M, = 0 on the boundary
    extension_margin = 0.3           # absolute; or extension_margin_rel

    [metric]
    g[1][1] = "1"
    g[1][2] = "0"
    g[2][2] = "1"
    # optional closed-form derivatives dg[i][j][k] = d g_ij / d x_k

    [field main]
    rank = 2
    extended_by_zero = true
    f[1][1] = "..." ...

    [body]
    indicator = "0.09 - (x1^2 + x2^2)"   # > 0 inside K
    distance = "sqrt(x1^2 + x2^2) - 0.3" # optional signed distance

    [run]
    seed = 0
    grid = 161
    ...

A bare metric file (no section headers) is accepted too: it is treated as a
merged [metric]+[domain] section.  Expression values may be quoted or bare.
Numeric outputs are CSV files with a JSON sidecar of metadata.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
from pathlib import Path

from .errors import GeotomoError
from .fields import TensorField
from .metric import DomainSpec, MetricSpec
from .support import ConvexBody

__all__ = [
    "load_experiment_text", "load_experiment", "load_metric_text",
    "load_field_text", "load_body_text", "write_csv_with_sidecar",
    "Experiment",
]


def _read_sections(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    stripped = text.lstrip()
    if not stripped.startswith("["):
        text = "[metric]\n" + text
    cp.read_string(text)
    return {name: dict(cp[name]) for name in cp.sections()}


def _value(raw):
    raw = raw.strip()
    if raw and raw[0] in "\"'" and raw[-1] == raw[0]:
        return raw[1:-1]
    return raw


def _get_float(section, key, default=None):
    if key not in section:
        if default is None:
            raise GeotomoError(f"missing required key '{key}'")
        return default
    return float(_value(section[key]))


def _get_bool(section, key, default=False):
    if key not in section:
        return default
    return _value(section[key]).lower() in ("1", "true", "yes", "on")


def _merged_metric_domain(sections):
    merged = {}
    for name in ("metric", "domain"):
        merged.update(sections.get(name, {}))
    if not merged:
        raise GeotomoError("config has no [metric]/[domain] keys")
    return merged


def _build_domain(keys):
    n = int(_value(keys.get("dimension", "2")))
    if "rho" not in keys:
        raise GeotomoError("domain needs a 'rho' defining-function expression")
    margin = None
    if "extension_margin" in keys:
        margin = float(_value(keys["extension_margin"]))
    margin_rel = float(_value(keys.get("extension_margin_rel", "0.15")))
    return DomainSpec(n, _value(keys["rho"]), extension_margin=margin,
                      extension_margin_rel=margin_rel)


def _build_metric(keys, n):
    g = {}
    dg = {}
    for key, raw in keys.items():
        if key.startswith("g[") :
            idx = _parse_indices(key, 2)
            g[idx] = _value(raw)
        elif key.startswith("dg["):
            idx = _parse_indices(key, 3)
            dg[idx] = _value(raw)
    if not g:
        raise GeotomoError("metric section defines no g[i][j] components")
    comps = [[None] * n for _ in range(n)]
    for (i, j), expr in g.items():
        comps[i - 1][j - 1] = expr
        comps[j - 1][i - 1] = expr
    for i in range(n):
        for j in range(n):
            if comps[i][j] is None:
                raise GeotomoError(f"metric component g[{i+1}][{j+1}] missing")
    dcomps = None
    if dg:
        dcomps = {}
        for (i, j, k), expr in dg.items():
            dcomps[(i - 1, j - 1, k - 1)] = expr
            dcomps[(j - 1, i - 1, k - 1)] = expr
    return MetricSpec(n, comps, derivatives=dcomps)


def _parse_indices(key, count):
    try:
        parts = key[key.index("["):].replace("]", "").split("[")[1:]
        idx = tuple(int(p) for p in parts)
    except Exception:
        raise GeotomoError(f"cannot parse indexed key '{key}'") from None
    if len(idx) != count:
        raise GeotomoError(f"key '{key}' needs {count} indices")
    return idx


def load_metric_text(text):
    """Parse a metric-spec file (metric + domain keys) -> (MetricSpec, DomainSpec)."""
    keys = _merged_metric_domain(_read_sections(text))
    domain = _build_domain(keys)
    metric = _build_metric(keys, domain.dimension)
    return metric, domain


def load_field_text(text, domain):
    """Parse a tensor-field file into a TensorField (closed-form components)."""
    sections = _read_sections(text)
    if "field" in sections:
        keys = sections["field"]
    else:
        named = [v for k, v in sections.items() if k.startswith("field")]
        keys = named[0] if named else sections.get("metric", {})
    return _field_from_keys(keys, domain)


def _field_from_keys(keys, domain):
    rank = int(_value(keys.get("rank", "2")))
    n = domain.dimension
    ext = _get_bool(keys, "extended_by_zero", False)
    if rank == 0:
        expr = _value(keys.get("f", keys.get("f[]", "0")))
        return TensorField.from_expressions(0, n, expr,
                                            extended_by_zero=ext, domain=domain)
    comps = {}
    for key, raw in keys.items():
        if key.startswith("f["):
            idx = _parse_indices(key, rank)
            comps[tuple(i - 1 for i in idx)] = _value(raw)
    if rank == 1:
        exprs = [comps.get((i,), "0") for i in range(n)]
    else:
        exprs = [[comps.get((i, j), comps.get((j, i), "0")) for j in range(n)]
                 for i in range(n)]
    return TensorField.from_expressions(rank, n, exprs,
                                        extended_by_zero=ext, domain=domain)


def load_body_text(text, domain):
    """Parse a convex-body file (indicator + optional signed distance)."""
    sections = _read_sections(text)
    keys = sections.get("body", sections.get("metric", {}))
    if "indicator" not in keys:
        raise GeotomoError("body file needs an 'indicator' expression")
    return ConvexBody.from_expressions(
        domain, _value(keys["indicator"]),
        distance=_value(keys["distance"]) if "distance" in keys else None)


class Experiment:
    """All inputs of one run: metric, domain, named fields, body, run params."""

    def __init__(self, metric, domain, fields, body, run):
        self.metric = metric
        self.domain = domain
        self.fields = fields
        self.body = body
        self.run = run

    def field(self, name=None):
        if name is None:
            return next(iter(self.fields.values()))
        return self.fields[name]


def load_experiment_text(text):
    sections = _read_sections(text)
    keys = _merged_metric_domain(sections)
    domain = _build_domain(keys)
    metric = _build_metric(keys, domain.dimension)
    fields = {}
    for name, sec in sections.items():
        if name == "field" or name.startswith("field "):
            label = name[len("field "):] if " " in name else "field"
            fields[label or "field"] = _field_from_keys(sec, domain)
    body = None
    if "body" in sections:
        body = load_body_text(text, domain)
    run = {k: _value(v) for k, v in sections.get("run", {}).items()}
    return Experiment(metric, domain, fields, body, run)


def load_experiment(path):
    return load_experiment_text(Path(path).read_text())


def write_csv_with_sidecar(path, header, rows, metadata):
    """Write rows to ``path`` (CSV) and metadata to ``path + '.meta.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(metadata, indent=2, default=float) + "\n")
    return path


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()
