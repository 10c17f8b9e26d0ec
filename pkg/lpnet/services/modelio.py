"""Model container and accelerator export; byte layouts are in docs/formats.md.

Container: `<4sHHII` header (magic, version, reserved, manifest length,
manifest crc32), a JSON manifest, then the blob section of little-endian
float32 tensors. Export: int16 two's-complement codes per weighted layer with
their Q-formats, closed by a crc32 of everything before it.
"""
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from marshmallow import Schema, fields, post_load, validate, ValidationError

from lpnet.exceptions import ChecksumError, ContainerError, ShapeMismatchError
from lpnet.models.model import DualCopyParam, LayerState, Model
from lpnet.models.network import LayerKind
from lpnet.models.quant import FixedPointFormat
from lpnet.models.reports import BitAllocation
from lpnet.services.fixedpoint import from_codes, to_codes
from lpnet.services.netdesc import emit_descriptor, parse_descriptor
from lpnet.utils.helpers import convert_to_native

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b'LPNM'
CONTAINER_VERSION = 1
CONTAINER_HEADER = struct.Struct('<4sHHII')

EXPORT_MAGIC = b'LPAX'
EXPORT_VERSION = 1
EXPORT_HEADER = struct.Struct('<4sHHI')
EXPORT_LAYER = struct.Struct('<BBHHHHH6B')
EXPORT_COUNT = struct.Struct('<I')
EXPORT_KINDS = {LayerKind.CONV: 1, LayerKind.FC: 2}
EXPORT_CODE_BITS = 16

BLOB_DTYPE = np.dtype('<f4')
CODE_DTYPE = np.dtype('<i2')


class BlobSchema(Schema):
    name = fields.Str(required=True)
    dtype = fields.Str(required=True, validate=validate.Equal('float32'))
    shape = fields.List(fields.Int(validate=validate.Range(min=0)), required=True)
    offset = fields.Int(required=True, validate=validate.Range(min=0))
    length = fields.Int(required=True, validate=validate.Range(min=0))
    sha256 = fields.Str(required=True, validate=validate.Length(equal=64))


class ManifestSchema(Schema):
    format_version = fields.Int(required=True)
    descriptor = fields.Str(required=True)
    provenance = fields.Dict(keys=fields.Str(), load_default=dict)
    blobs = fields.List(fields.Nested(BlobSchema), required=True)

    @post_load
    def check_version(self, data, **kwargs):
        if data['format_version'] != CONTAINER_VERSION:
            raise ValidationError(f"unsupported container version {data['format_version']}", 'format_version')
        return data


def _blob_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()


def _container_blobs(model: Model) -> Dict[str, np.ndarray]:
    blobs = {}
    for name, state in model.layers.items():
        quantizes = state.quant is not None and state.quant.enabled
        for kind, param in state.params().items():
            blobs[f"{name}.{kind}"] = param.shadow
            if quantizes and not param.stale:
                blobs[f"{name}.{kind}.q"] = param.quantized
    return blobs


def dumps_model(model: Model) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, array in _container_blobs(model).items():
        data = _blob_bytes(array)
        entries.append({'name': name, 'dtype': 'float32', 'shape': list(array.shape), 'offset': offset,
                        'length': len(data), 'sha256': hashlib.sha256(data).hexdigest()})
        chunks.append(data)
        offset += len(data)
    manifest = ManifestSchema().dump({'format_version': CONTAINER_VERSION, 'descriptor': emit_descriptor(model.net),
                                      'provenance': convert_to_native(model.provenance), 'blobs': entries})
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode('utf-8')
    header = CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, 0, len(manifest_bytes),
                                   zlib.crc32(manifest_bytes))
    return header + manifest_bytes + b''.join(chunks)


def save_model(model: Model, path) -> None:
    data = dumps_model(model)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info('wrote model container %s (%d bytes)', path, len(data))


def _decode_blob(entry, blob_section: bytes) -> np.ndarray:
    end = entry['offset'] + entry['length']
    if end > len(blob_section):
        raise ChecksumError(f"blob '{entry['name']}' is truncated ({len(blob_section)} of {end} bytes present)")
    data = blob_section[entry['offset']:end]
    if hashlib.sha256(data).hexdigest() != entry['sha256']:
        raise ChecksumError(f"checksum mismatch in blob '{entry['name']}'")
    count = int(np.prod(entry['shape'], dtype=np.int64))
    if count * BLOB_DTYPE.itemsize != entry['length']:
        raise ContainerError(f"blob '{entry['name']}' declares shape {tuple(entry['shape'])} "
                             f"but holds {entry['length']} bytes")
    return np.frombuffer(data, dtype=BLOB_DTYPE).astype(np.float32).reshape(entry['shape'])


def loads_model(data: bytes) -> Model:
    if len(data) < CONTAINER_HEADER.size:
        raise ChecksumError('container truncated inside its header')
    magic, version, _, manifest_len, manifest_crc = CONTAINER_HEADER.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise ContainerError(f"not a model container (magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = CONTAINER_HEADER.size
    manifest_bytes = data[start:start + manifest_len]
    if len(manifest_bytes) != manifest_len or zlib.crc32(manifest_bytes) != manifest_crc:
        raise ChecksumError('manifest checksum mismatch (truncated or corrupt container)')
    try:
        manifest = ManifestSchema().load(json.loads(manifest_bytes.decode('utf-8')))
    except (ValueError, ValidationError) as err:
        raise ContainerError(f"invalid manifest: {err}") from err

    net = parse_descriptor(manifest['descriptor'])
    blob_section = data[start + manifest_len:]
    arrays = {entry['name']: _decode_blob(entry, blob_section) for entry in manifest['blobs']}

    layers = {}
    for desc in net.weighted_layers():
        quantizes = desc.quant.enabled
        params = {}
        for kind in ('weight', 'bias') if desc.bias else ('weight',):
            key = f"{desc.name}.{kind}"
            if key not in arrays:
                raise ContainerError(f"container has no blob '{key}'")
            expected = desc.weight_shape if kind == 'weight' else (desc.out_channels,)
            if arrays[key].shape != expected:
                raise ShapeMismatchError(arrays[key].shape, expected, f"blob '{key}' and descriptor")
            param = DualCopyParam(shadow=arrays[key])
            if not quantizes:
                param.refresh(None)
            elif f"{key}.q" in arrays:
                param.quantized, param.stale = arrays[f"{key}.q"], False
            params[kind] = param
        layers[desc.name] = LayerState(desc=desc, weight=params['weight'], bias=params.get('bias'))
    return Model(net=net, layers=layers, provenance=dict(manifest['provenance']))


def load_model(path) -> Model:
    with open(path, 'rb') as f:
        return loads_model(f.read())


def models_identical(a: Model, b: Model) -> bool:
    """Same descriptor, provenance and bit pattern of every stored tensor."""
    if emit_descriptor(a.net) != emit_descriptor(b.net) or a.provenance != b.provenance:
        return False
    pa, pb = a.params(), b.params()
    if pa.keys() != pb.keys():
        return False
    for key, param in pa.items():
        other = pb[key]
        if param.stale != other.stale or param.shadow.tobytes() != other.shadow.tobytes():
            return False
        if (param.quantized is None) != (other.quantized is None):
            return False
        if param.quantized is not None and param.quantized.tobytes() != other.quantized.tobytes():
            return False
    return True


# --- accelerator export ----------------------------------------------------

@dataclass
class ExportedLayer:
    name: str
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int
    weight_fmt: FixedPointFormat
    act_fmt: FixedPointFormat
    bias_fmt: FixedPointFormat
    weight_codes: np.ndarray
    bias_codes: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return from_codes(self.weight_codes, self.weight_fmt)

    @property
    def bias(self) -> np.ndarray:
        return from_codes(self.bias_codes, self.bias_fmt)


def _check_export_format(layer: str, fmt: FixedPointFormat):
    if fmt.total_bits != EXPORT_CODE_BITS or not fmt.signed:
        raise ContainerError(f"layer '{layer}': export supports signed {EXPORT_CODE_BITS}-bit formats only, got {fmt}")


def _layer_formats(state: LayerState, allocation: Optional[BitAllocation]):
    quant = state.quant
    if allocation is not None and state.name in allocation.layers:
        chosen = allocation.layers[state.name]
        weight_fmt, act_fmt = chosen.weight_fmt, chosen.act_fmt
    else:
        weight_fmt, act_fmt = quant.weight_fmt, quant.act_fmt
    bias_fmt = quant.bias_fmt or weight_fmt
    for fmt in (weight_fmt, act_fmt, bias_fmt):
        _check_export_format(state.name, fmt)
    return weight_fmt, act_fmt, bias_fmt


def _exported_values(state: LayerState) -> Dict[str, np.ndarray]:
    """Quantized copies for quantizing layers, shadows otherwise (which then
    fail the grid check: export never re-rounds)."""
    weights, bias = state.forward_params(quantized=True)
    if bias is None:
        bias = np.zeros(state.desc.out_channels, dtype=weights.dtype)
    return {'weight': weights, 'bias': bias}


def dumps_export(model: Model, allocation: Optional[BitAllocation] = None) -> bytes:
    weighted = model.net.weighted_layers()
    chunks = [EXPORT_HEADER.pack(EXPORT_MAGIC, EXPORT_VERSION, 0, len(weighted))]
    for desc in weighted:
        state = model[desc.name]
        weight_fmt, act_fmt, bias_fmt = _layer_formats(state, allocation)
        values = _exported_values(state)
        weight_codes = to_codes(values['weight'], weight_fmt).astype(CODE_DTYPE)
        bias_codes = to_codes(values['bias'], bias_fmt).astype(CODE_DTYPE)
        name = desc.name.encode('utf-8')
        chunks.append(struct.pack('<H', len(name)) + name)
        chunks.append(EXPORT_LAYER.pack(EXPORT_KINDS[desc.kind], int(desc.bias), desc.in_channels,
                                        desc.out_channels, desc.kernel, desc.stride, desc.pad,
                                        weight_fmt.bd, weight_fmt.ad, act_fmt.bd, act_fmt.ad,
                                        bias_fmt.bd, bias_fmt.ad))
        for codes in (weight_codes, bias_codes):
            chunks.append(EXPORT_COUNT.pack(codes.size) + codes.tobytes())
    body = b''.join(chunks)
    return body + struct.pack('<I', zlib.crc32(body))


def export_accelerator(model: Model, allocation: Optional[BitAllocation], path) -> None:
    data = dumps_export(model, allocation)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info('wrote accelerator export %s (%d bytes)', path, len(data))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ContainerError('export truncated')
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, layout: struct.Struct):
        return layout.unpack(self.take(layout.size))


def loads_export(data: bytes) -> List[ExportedLayer]:
    if len(data) < EXPORT_HEADER.size + 4:
        raise ChecksumError('export truncated')
    body, (crc,) = data[:-4], struct.unpack('<I', data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError('export checksum mismatch')
    reader = _Reader(body)
    magic, version, _, count = reader.unpack(EXPORT_HEADER)
    if magic != EXPORT_MAGIC:
        raise ContainerError(f"not an accelerator export (magic {magic!r})")
    if version != EXPORT_VERSION:
        raise ContainerError(f"unsupported export version {version}")
    kinds = {code: kind for kind, code in EXPORT_KINDS.items()}
    layers = []
    for _ in range(count):
        (name_len,) = struct.unpack('<H', reader.take(2))
        name = reader.take(name_len).decode('utf-8')
        kind_code, _, c_in, c_out, k, stride, pad, wbd, wad, abd, aad, bbd, bad = reader.unpack(EXPORT_LAYER)
        if kind_code not in kinds:
            raise ContainerError(f"layer '{name}': unknown kind code {kind_code}")
        codes = []
        for _ in range(2):
            (n,) = reader.unpack(EXPORT_COUNT)
            codes.append(np.frombuffer(reader.take(n * CODE_DTYPE.itemsize), dtype=CODE_DTYPE).astype(np.int64))
        kind = kinds[kind_code]
        shape = (c_out, c_in, k, k) if kind is LayerKind.CONV else (c_out, c_in)
        if codes[0].size != int(np.prod(shape)) or codes[1].size != c_out:
            raise ContainerError(f"layer '{name}': code counts do not match its dimensions")
        layers.append(ExportedLayer(name=name, kind=kind, in_channels=c_in, out_channels=c_out, kernel=k,
                                    stride=stride, pad=pad, weight_fmt=FixedPointFormat(wbd, wad),
                                    act_fmt=FixedPointFormat(abd, aad), bias_fmt=FixedPointFormat(bbd, bad),
                                    weight_codes=codes[0].reshape(shape), bias_codes=codes[1]))
    if reader.pos != len(body):
        raise ContainerError('trailing bytes after the last layer record')
    return layers


def read_accelerator(path) -> List[ExportedLayer]:
    with open(path, 'rb') as f:
        return loads_export(f.read())


def verify_export(model: Model, layers: List[ExportedLayer]) -> None:
    """Decoded export must equal the in-memory quantized tensors exactly."""
    by_name = {layer.name: layer for layer in layers}
    for desc in model.net.weighted_layers():
        exported = by_name.get(desc.name)
        if exported is None:
            raise ContainerError(f"export has no record for layer '{desc.name}'")
        values = _exported_values(model[desc.name])
        if not np.array_equal(exported.weights, values['weight'].astype(np.float64)) or \
                not np.array_equal(exported.bias, values['bias'].astype(np.float64)):
            raise ContainerError(f"decoded export of layer '{desc.name}' differs from the model")
