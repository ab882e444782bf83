"""
Length-prefixed binary transport so the vector store can run as a separate, untrusted process.

Frame: length (u32 LE, body size + 1) | opcode (u8) | body. Bodies reuse the ciphertext and store
record serializations, so nothing on the wire is ever decrypted here.
"""
import json
import logging
import signal
import socket
import socketserver
import struct
import threading
from collections import Counter

import utils
from ciphertext_format import CipherVector
from utils import PpragError, RemoteError, TransportError
from vector_store import SearchHit, StoredRecord, StoreIndex

logger = logging.getLogger(__name__)

OP_UPLOAD = 1
OP_SEARCH = 2
OP_HITS = 3
OP_ERROR = 4
OP_OK = 5
OP_INFO = 6

OPCODE_NAMES = {OP_UPLOAD: 'upload', OP_SEARCH: 'search', OP_HITS: 'hits',
                OP_ERROR: 'error', OP_OK: 'ok', OP_INFO: 'info'}

MAX_FRAME_BYTES = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

_FRAME_HEADER = struct.Struct('<IB')


class FrameTooLarge(TransportError):
    code = 'FRAME_TOO_LARGE'


class MalformedFrame(PpragError):
    code = 'MALFORMED_FRAME'
    exit_code = 9


def parse_address(address):
    """
    Split 'host:port' into a (host, port) tuple.

    Parameters:
    address (str or tuple): 'host:port', ':port' or an already split pair.

    Returns:
    tuple: (host, port).
    """
    if isinstance(address, tuple):
        return address
    host, sep, port = str(address).rpartition(':')
    if not sep or not port.isdigit():
        raise utils.ParameterError(f"address must look like host:port, got '{address}'")
    return host or '127.0.0.1', int(port)


def encode_frame(opcode, body=b''):
    return _FRAME_HEADER.pack(len(body) + 1, opcode) + body


def read_frame(read, max_frame=MAX_FRAME_BYTES):
    """
    Read one frame.

    Parameters:
    read (callable): read(n) returning up to n bytes, b'' at end of stream.
    max_frame (int): Largest accepted length field.

    Returns:
    tuple or None: (opcode, body), or None on a clean end of stream before a frame starts.

    Raises:
    FrameTooLarge: If the length field exceeds max_frame.
    TransportError: If the stream ends mid-frame.
    MalformedFrame: If the length field is zero.
    """
    header = _read_exact(read, _FRAME_HEADER.size, allow_eof=True)
    if header is None:
        return None
    length, opcode = _FRAME_HEADER.unpack(header)
    if length > max_frame:
        raise FrameTooLarge(f"frame of {length} bytes exceeds the {max_frame} byte limit",
                            details={'length': length, 'max_frame': max_frame})
    if length == 0:
        raise MalformedFrame('frame length must count the opcode byte')
    return opcode, _read_exact(read, length - 1)


def _read_exact(read, n, allow_eof=False):
    chunks = []
    remaining = n
    while remaining:
        chunk = read(remaining)
        if not chunk:
            if allow_eof and remaining == n:
                return None
            raise TransportError(f"connection closed after {n - remaining} of {n} bytes")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def encode_upload(records):
    return struct.pack('<I', len(records)) + b''.join(r.to_bytes() for r in records)


def decode_upload(body):
    reader = utils.ByteReader(body)
    count = reader.unpack('<I', 'record count')
    records = [StoredRecord.read_from(reader) for _ in range(count)]
    _expect_end(reader)
    return records


def encode_search(query, k_prime):
    return struct.pack('<I', k_prime) + query.to_bytes()


def decode_search(body):
    reader = utils.ByteReader(body)
    k_prime = reader.unpack('<I', "k'")
    query = CipherVector.read_from(reader)
    _expect_end(reader)
    return query, k_prime


def encode_hits(hits):
    parts = [struct.pack('<I', len(hits))]
    for hit in hits:
        parts.append(struct.pack('<d', hit.distance))
        parts.append(hit.record.to_bytes())
    return b''.join(parts)


def decode_hits(body):
    reader = utils.ByteReader(body)
    count = reader.unpack('<I', 'hit count')
    hits = []
    for _ in range(count):
        distance = reader.unpack('<d', 'hit distance')
        record = StoredRecord.read_from(reader)
        hits.append(SearchHit(record.id, distance, record))
    _expect_end(reader)
    return hits


def encode_error(error):
    return json.dumps(error.asdict(), sort_keys=True).encode('utf-8')


def decode_error(body):
    """
    Rebuild an application error from an error frame body.

    Known codes come back as their own error class; anything else becomes a RemoteError.
    """
    try:
        payload = json.loads(body.decode('utf-8'))
        code, message = payload['code'], payload['message']
        details = dict(payload.get('details') or {})
    except (ValueError, KeyError, TypeError):
        return RemoteError('unparseable error frame from server', details={'raw': body[:64].hex()})
    details['remote'] = True
    cls = utils.ERRORS_BY_CODE.get(code)
    if cls is None or issubclass(cls, TransportError):
        return RemoteError(message, code=code, details=details)
    return cls(message, details=details)


def _expect_end(reader):
    if reader.remaining:
        raise MalformedFrame(f"{reader.remaining} unexpected trailing bytes in frame body",
                             details={'offset': reader.offset})


class StoreRequestHandler(socketserver.StreamRequestHandler):
    """
    Serves frames on one connection until the client hangs up.
    """

    def handle(self):
        server = self.server
        peer = '%s:%s' % self.client_address[:2]
        logger.debug('connection from %s', peer)
        while True:
            try:
                frame = read_frame(self.rfile.read, server.max_frame)
            except FrameTooLarge as e:
                logger.warning('closing %s: %s', peer, e)
                return
            except MalformedFrame as e:
                self._reply(OP_ERROR, encode_error(e))
                continue
            except (TransportError, OSError) as e:
                logger.debug('connection %s ended: %s', peer, e)
                return
            if frame is None:
                logger.debug('connection from %s closed', peer)
                return

            opcode, body = frame
            server.count_request(opcode)
            try:
                reply = server.dispatch(opcode, body)
            except PpragError as e:
                logger.error('request %s from %s failed: %s', OPCODE_NAMES.get(opcode, opcode), peer, e)
                reply = (OP_ERROR, encode_error(e))
            except Exception as e:
                logger.exception('unexpected failure serving %s', peer)
                reply = (OP_ERROR, encode_error(PpragError(f"internal server error: {e}")))
            if not self._reply(*reply):
                return

    def _reply(self, opcode, body):
        try:
            self.wfile.write(encode_frame(opcode, body))
            self.wfile.flush()
            return True
        except OSError as e:
            logger.debug('reply failed: %s', e)
            return False


class StoreServer(socketserver.ThreadingTCPServer):
    """
    Threaded TCP server in front of a StoreIndex. It never sees key material.

    Parameters:
    store (vector_store.StoreIndex): The served store.
    address (tuple): (host, port) to bind; port 0 picks a free port.
    max_frame (int): Largest accepted frame length.
    """
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store, address, max_frame=MAX_FRAME_BYTES):
        self.store = store
        self.max_frame = max_frame
        self.request_counts = Counter()
        self._count_lock = threading.Lock()
        self._thread = None
        super().__init__(address, StoreRequestHandler)

    @property
    def address(self):
        host, port = self.server_address[:2]
        return f'{host}:{port}'

    def count_request(self, opcode):
        with self._count_lock:
            self.request_counts[OPCODE_NAMES.get(opcode, 'unknown')] += 1

    def dispatch(self, opcode, body):
        if opcode == OP_UPLOAD:
            records = decode_upload(body)
            self.store.ingest(records)
            return OP_OK, struct.pack('<Q', self.store.count)
        if opcode == OP_SEARCH:
            query, k_prime = decode_search(body)
            return OP_HITS, encode_hits(self.store.topk_search(query, k_prime))
        if opcode == OP_INFO:
            return OP_INFO, struct.pack('<IQ', self.store.dim, self.store.count)
        raise MalformedFrame(f"unknown opcode {opcode}", details={'opcode': opcode})

    def start_background(self):
        self._thread = threading.Thread(target=self.serve_forever, name='store-server', daemon=True)
        self._thread.start()
        logger.info('store server listening on %s', self.address)
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()
        if self.store.path is not None:
            self.store.persist()
        logger.info('store server stopped; requests served: %s', dict(self.request_counts))


def serve(store_path, bind_address, dim=None, workers=1, max_frame=MAX_FRAME_BYTES):
    """
    Serve a store file until SIGINT or SIGTERM, then flush the store and return.

    Parameters:
    store_path (str): Store file. Created empty when missing and dim is given.
    bind_address (str): 'host:port'.
    dim (int, optional): Dimension of a newly created store.
    workers (int): Search threads inside the store.
    max_frame (int): Largest accepted frame length.

    Returns:
    dict: Request counts by opcode name.
    """
    if dim is None:
        store = StoreIndex.load(store_path, workers=workers)
    else:
        store = StoreIndex.open_or_create(store_path, dim, workers=workers)

    server = StoreServer(store, parse_address(bind_address), max_frame=max_frame)
    stop = threading.Event()

    def request_stop(signum, frame):
        logger.info('received signal %d, shutting down', signum)
        stop.set()

    previous = {sig: signal.signal(sig, request_stop) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        server.start_background()
        print(f'serving {store.count} records (dim {store.dim}) on {server.address}', flush=True)
        while not stop.wait(0.5):
            pass
    finally:
        server.stop()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return dict(server.request_counts)


class RemoteStore:
    """
    Client with the same ingest/topk_search/count/dim surface as StoreIndex.

    One request is in flight per client at a time; use one client per thread for parallel calls.

    Parameters:
    address (str or tuple): Server 'host:port'.
    timeout (float): Socket timeout in seconds for connect and each request.
    max_frame (int): Largest accepted reply frame.
    """

    def __init__(self, address, timeout=DEFAULT_TIMEOUT, max_frame=MAX_FRAME_BYTES):
        self._address = parse_address(address)
        self._timeout = timeout
        self._max_frame = max_frame
        self._sock = None
        self._rfile = None
        self._lock = threading.Lock()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return 'RemoteStore(%s:%d)' % self._address

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._address, timeout=self._timeout)
            except OSError as e:
                raise TransportError(f"cannot connect to {self._address[0]}:{self._address[1]}: {e}",
                                     details={'address': '%s:%d' % self._address})
            self._rfile = self._sock.makefile('rb')
        return self._sock

    def close(self):
        if self._sock is not None:
            try:
                self._rfile.close()
                self._sock.close()
            finally:
                self._sock = None
                self._rfile = None

    def _send_frame(self, opcode, body):
        self._connect().sendall(encode_frame(opcode, body))

    def _request(self, opcode, body=b''):
        with self._lock:
            try:
                self._send_frame(opcode, body)
                frame = read_frame(self._rfile.read, self._max_frame)
            except TransportError:
                self.close()
                raise
            except OSError as e:
                self.close()
                raise TransportError(f"request {OPCODE_NAMES[opcode]} failed: {e}",
                                     details={'opcode': opcode})
        if frame is None:
            self.close()
            raise TransportError('server closed the connection')
        reply, reply_body = frame
        if reply == OP_ERROR:
            raise decode_error(reply_body)
        return reply, reply_body

    def _expect(self, reply, expected):
        if reply != expected:
            raise RemoteError(f"expected {OPCODE_NAMES[expected]} reply, got opcode {reply}")

    def ingest(self, records):
        records = list(records)
        if not records:
            return self
        reply, _ = self._request(OP_UPLOAD, encode_upload(records))
        self._expect(reply, OP_OK)
        return self

    def topk_search(self, query, k_prime):
        if k_prime < 1:
            raise utils.ParameterError(f"k' must be >= 1, got {k_prime}", details={'k_prime': k_prime})
        k_prime = min(int(k_prime), 2 ** 32 - 1)
        reply, body = self._request(OP_SEARCH, encode_search(query, k_prime))
        self._expect(reply, OP_HITS)
        return decode_hits(body)

    def info(self):
        reply, body = self._request(OP_INFO)
        self._expect(reply, OP_INFO)
        dim, count = struct.unpack('<IQ', body)
        return dim, count

    @property
    def dim(self):
        return self.info()[0]

    @property
    def count(self):
        return self.info()[1]


def remote_store_client(address, timeout=DEFAULT_TIMEOUT):
    return RemoteStore(address, timeout=timeout)
