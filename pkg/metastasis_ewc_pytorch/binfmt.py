import struct

import numpy as np
import torch
from torch import Tensor

from metastasis_ewc_pytorch.errors import FormatError

# dtype codes shared by the checkpoint, likelihood map and forest formats

DTYPE_CODES = {
    0: np.dtype('<f4'),
    1: np.dtype('<f8'),
    2: np.dtype('<i8'),
    3: np.dtype('<u1'),
    4: np.dtype('<u2'),
    5: np.dtype('<i4'),
}

CODE_FOR_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

# functions

def exists(v):
    return v is not None

def to_numpy(t):
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()

    return np.asarray(t)

# writer

class ByteWriter:
    def __init__(self):
        self.chunks = []

    def pack(self, fmt, *values):
        self.chunks.append(struct.pack('<' + fmt, *values))

    def raw(self, data: bytes):
        self.chunks.append(bytes(data))

    def string(self, value: str):
        encoded = value.encode('utf-8')
        self.pack('H', len(encoded))
        self.raw(encoded)

    def array(self, arr):
        arr = to_numpy(arr)
        le_dtype = arr.dtype.newbyteorder('<')

        assert le_dtype in CODE_FOR_DTYPE, f'unsupported dtype {arr.dtype}'

        self.pack('BB', CODE_FOR_DTYPE[le_dtype], arr.ndim)
        self.pack(f'{arr.ndim}I', *arr.shape)
        self.raw(np.ascontiguousarray(arr, dtype = le_dtype).tobytes())

    def blob(self, name: str, arr):
        self.string(name)
        self.array(arr)

    def getvalue(self) -> bytes:
        return b''.join(self.chunks)

# reader

class ByteReader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def fail(self, code, message):
        raise FormatError(f'[{code}] {message}', self.offset)

    def take(self, size):
        if self.offset + size > len(self.data):
            self.fail('truncated', f'needed {size} bytes, only {len(self.data) - self.offset} remain')

        chunk = self.data[self.offset:(self.offset + size)]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        fmt = '<' + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def expect_magic(self, magic: bytes):
        found = bytes(self.take(len(magic)))

        if found != magic:
            self.offset -= len(magic)
            self.fail('bad_magic', f'expected magic {magic!r}, found {found!r}')

    def string(self) -> str:
        length = self.unpack('H')
        return bytes(self.take(length)).decode('utf-8')

    def array(self) -> np.ndarray:
        code, ndim = self.unpack('BB')

        if code not in DTYPE_CODES:
            self.fail('dtype', f'unknown dtype code {code}')

        shape = self.unpack(f'{ndim}I') if ndim > 0 else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)

        dtype = DTYPE_CODES[code]
        count = int(np.prod(shape, dtype = np.int64))

        arr = np.frombuffer(self.take(count * dtype.itemsize), dtype = dtype)
        return arr.astype(dtype.newbyteorder('='), copy = True).reshape(shape)

    def tensor(self) -> Tensor:
        return torch.from_numpy(self.array())

    def blob(self) -> tuple[str, Tensor]:
        name = self.string()
        return name, self.tensor()

    def at_end(self):
        return self.offset == len(self.data)
