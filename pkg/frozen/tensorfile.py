import struct

import numpy as np

# NOTE: THESE VALUES DEFINE THE ON-DISK LAYOUT. SEE DONOTCHANGEANYFILES.md
MAGIC = b"USBL"
VERSION = 1
MAX_NDIM = 4

# dtype code -> numpy dtype of the payload
DTYPES = {
    0: np.dtype("<f4"),
}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}

# magic, version, dtype_code, ndim
HEADER = struct.Struct("<4sIBI")
DIM = struct.Struct("<Q")


def header_size(ndim):
    return HEADER.size + ndim * DIM.size


def pack_header(dims, dtype_code=0):
    return HEADER.pack(MAGIC, VERSION, dtype_code, len(dims)) + \
        b"".join(DIM.pack(int(d)) for d in dims)


def unpack_header(buffer):
    """Returns (magic, version, dtype_code, ndim) from the first HEADER.size bytes."""
    return HEADER.unpack_from(buffer, 0)


def unpack_dims(buffer, ndim):
    return tuple(DIM.unpack_from(buffer, HEADER.size + i * DIM.size)[0] for i in range(ndim))
