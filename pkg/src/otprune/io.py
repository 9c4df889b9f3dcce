"""Model files: ``<name>.otg.json`` (structure) plus ``<name>.otg.bin`` (weights).

The sidecar is a flat sequence of records, one per tensor, in node order and
then slot order: a little-endian uint32 byte length followed by that many bytes
of little-endian float32, row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import KINDS, TENSOR_SLOTS, GraphError, LayerNode, NetworkGraph, check

FORMAT_VERSION = 1


class ModelFileError(GraphError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".otg.json", ".otg.bin", ".otg"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".otg.json"), p.with_name(name + ".otg.bin")


def save(graph: NetworkGraph, path) -> Path:
    """Write the graph; returns the path of the JSON document."""
    check(graph)
    jpath, bpath = _paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    nodes = []
    blob = bytearray()
    for n in graph.nodes:
        entry = {"name": n.name, "kind": n.kind, "inputs": list(n.inputs), "attrs": n.attrs, "tensors": []}
        for slot in TENSOR_SLOTS.get(n.kind, ()):
            if slot not in n.tensors:
                continue
            arr = np.ascontiguousarray(n.tensors[slot], dtype="<f4")
            data = arr.tobytes()
            entry["tensors"].append({"slot": slot, "shape": list(arr.shape)})
            blob += struct.pack("<I", len(data)) + data
        nodes.append(entry)
    doc = {"format_version": FORMAT_VERSION, "input_shape": list(graph.input_shape), "nodes": nodes}
    jpath.write_text(json.dumps(doc, indent=1, default=_json_default))
    bpath.write_bytes(bytes(blob))
    return jpath


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load(path) -> NetworkGraph:
    jpath, bpath = _paths(path)
    try:
        doc = json.loads(jpath.read_text())
        blob = bpath.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFileError(f"cannot read model {jpath}: {e}") from e
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{jpath}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    pos = 0
    nodes = []
    for entry in doc["nodes"]:
        kind = entry["kind"]
        if kind not in KINDS:
            raise ModelFileError(f"{jpath}: node {entry['name']!r} has unknown layer kind {kind!r}")
        tensors = {}
        for t in entry["tensors"]:
            if pos + 4 > len(blob):
                raise ModelFileError(f"{bpath}: weight blob truncated before {entry['name']}.{t['slot']}")
            (nbytes,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            want = 4 * int(np.prod(t["shape"], dtype=np.int64))
            if nbytes != want or pos + nbytes > len(blob):
                raise ModelFileError(
                    f"{bpath}: length mismatch for {entry['name']}.{t['slot']} "
                    f"(header {nbytes}, shape needs {want}, {len(blob) - pos} bytes left)")
            tensors[t["slot"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos) \
                .astype(np.float32).reshape(t["shape"])
            pos += nbytes
        nodes.append(LayerNode(entry["name"], kind, list(entry["inputs"]), entry["attrs"], tensors))
    if pos != len(blob):
        raise ModelFileError(f"{bpath}: length mismatch, {len(blob) - pos} trailing bytes")
    return check(NetworkGraph(nodes, tuple(doc["input_shape"])))
