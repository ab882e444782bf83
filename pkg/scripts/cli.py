"""
Command line entry point.

    keygen | ingest | serve | query | kprime | bench-throughput | bench-asr | bench-flip

Settings come from built-in defaults, then a key=value config file (--config or PPRAG_CONFIG), then
flags. Failures print one line `error <CODE>: <message>` on stderr and exit with the error's code.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from typing import Optional

import eval_harness
import net_service
import payload_crypto
import pipeline
import scheme_core
import utils
from utils import ConfigError, IngestRejected, ParameterError, PpragError
from vector_store import StoreIndex

logger = logging.getLogger(__name__)

CONFIG_ENV = 'PPRAG_CONFIG'
USAGE_EXIT = 64
DEFAULT_HASH_DIM = 64


@dataclass(frozen=True)
class CliConfig:
    key: Optional[str] = None
    payload_key: Optional[str] = None
    store: Optional[str] = None
    addr: Optional[str] = None
    beta: float = scheme_core.DEFAULT_BETA
    k: int = 5
    radius: float = 0.0
    seed: Optional[int] = None
    dim: Optional[int] = None
    format: str = 'jsonl'
    log_level: str = 'WARNING'
    log_file: Optional[str] = None
    max_frame: int = net_service.MAX_FRAME_BYTES
    workers: int = 1

    @classmethod
    def build(cls, args, environ=None):
        """
        Layer defaults, config file and flags.

        Parameters:
        args (argparse.Namespace): Parsed flags; None means not given.
        environ (dict, optional): Environment, os.environ by default.

        Returns:
        CliConfig: The merged configuration.
        """
        environ = os.environ if environ is None else environ
        config = cls()
        path = getattr(args, 'config', None) or environ.get(CONFIG_ENV)
        if path:
            config = config._merge(utils.read_config_file(path), source=path)
        flags = {f.name: getattr(args, f.name) for f in fields(cls)
                 if getattr(args, f.name, None) is not None}
        return config._merge(flags, source='command line')

    def _merge(self, values, source):
        known = {f.name: f for f in fields(self)}
        updates = {}
        for name, raw in values.items():
            name = name.replace('-', '_')
            if name not in known:
                logger.warning("ignoring unknown setting '%s' from %s", name, source)
                continue
            updates[name] = self._convert(name, raw, source)
        return replace(self, **updates)

    @staticmethod
    def _convert(name, raw, source):
        if not isinstance(raw, str):
            return raw
        try:
            if name in ('beta', 'radius'):
                return float(raw)
            if name in ('k', 'seed', 'dim', 'max_frame', 'workers'):
                return int(raw)
        except ValueError:
            raise ConfigError(f"invalid value '{raw}' for {name} in {source}",
                              details={'setting': name})
        return raw

    def require(self, *names):
        missing = [name for name in names if getattr(self, name) is None]
        if missing:
            flags = ', '.join('--' + name.replace('_', '-') for name in missing)
            raise ConfigError(f"missing required setting(s): {flags}", details={'missing': missing})

    @property
    def endpoint(self):
        return self.addr or self.store


class UsageParser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f'error USAGE: {message}\n')


def _add_common(parser):
    parser.add_argument('--config', help='key=value config file (default: $%s)' % CONFIG_ENV)
    parser.add_argument('--log-level', dest='log_level', help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--log-file', dest='log_file', help='rotating log file for warnings and errors')
    parser.add_argument('--seed', type=int, help='seed for reproducible runs (never for keygen)')


def _add_keys(parser):
    parser.add_argument('--key', help='scheme key file')
    parser.add_argument('--payload-key', dest='payload_key', help='payload key file')


def _add_outputs(parser):
    parser.add_argument('--out', help='CSV output file')
    parser.add_argument('--manifest', help='JSON-lines run manifest to append to')


def build_parser():
    parser = UsageParser(prog='pprag', description='Private retrieval over an encrypted vector store.')
    commands = parser.add_subparsers(dest='command', metavar='command', parser_class=UsageParser)
    commands.required = True

    p = commands.add_parser('keygen', help='generate the scheme key and the payload key')
    _add_common(p)
    _add_keys(p)
    p.add_argument('--beta', type=float, help='distance margin beta')
    p.add_argument('--s-min', dest='s_min', type=float, default=scheme_core.DEFAULT_S_RANGE[0])
    p.add_argument('--s-max', dest='s_max', type=float, default=scheme_core.DEFAULT_S_RANGE[1])
    p.add_argument('--force', action='store_true', help='overwrite existing key files')

    p = commands.add_parser('ingest', help='encrypt documents and upload them to a store')
    _add_common(p)
    _add_keys(p)
    p.add_argument('--store', help='store file')
    p.add_argument('--addr', help='remote store host:port')
    p.add_argument('--docs', required=True, help='documents file')
    p.add_argument('--texts', help='texts file for --format bin')
    p.add_argument('--format', choices=('jsonl', 'bin'))
    p.add_argument('--dim', type=int, help='hash embedder dimension for documents without embeddings')

    p = commands.add_parser('serve', help='serve a store file over TCP')
    _add_common(p)
    p.add_argument('--store', help='store file')
    p.add_argument('--addr', help='bind host:port')
    p.add_argument('--dim', type=int, help='dimension of a store created on first use')
    p.add_argument('--max-frame', dest='max_frame', type=int, help='largest accepted frame in bytes')
    p.add_argument('--workers', type=int, help='search threads')

    p = commands.add_parser('query', help='retrieve the top-k documents for a query')
    _add_common(p)
    _add_keys(p)
    p.add_argument('--store', help='store file')
    p.add_argument('--addr', help='remote store host:port')
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--text', help='query text (embedded with the hash embedder)')
    group.add_argument('--query-embedding', dest='query_embedding',
                       help='JSON file holding the query embedding as a list of numbers')
    p.add_argument('--k', type=int)
    p.add_argument('--radius', type=float)
    p.add_argument('--oracle-docs', dest='oracle_docs',
                   help='also print the plaintext top-k over this documents file')
    p.add_argument('--format', choices=('jsonl', 'bin'))
    p.add_argument('--texts', help='texts file for --format bin oracle documents')

    p = commands.add_parser('kprime', help="compute k' for (n, m, r, k)")
    _add_common(p)
    p.add_argument('--n', type=int, nargs='+', required=True)
    p.add_argument('--m', type=int, required=True)
    p.add_argument('--r', type=float, nargs='+', required=True)
    p.add_argument('--k', type=int, nargs='+', required=True)
    p.add_argument('--mapping', choices=('chord', 'tangent'), default='chord')
    _add_outputs(p)

    p = commands.add_parser('bench-throughput', help='encryption throughput')
    _add_common(p)
    p.add_argument('--dims', type=int, nargs='+', default=[192, 384, 768, 1536])
    p.add_argument('--batch', type=int, default=1000)
    p.add_argument('--repeats', type=int, default=5)
    _add_outputs(p)

    p = commands.add_parser('bench-asr', help='vector-analysis attack success rate')
    _add_common(p)
    p.add_argument('--dims', type=int, nargs='+', default=[32, 128, 768])
    p.add_argument('--m', type=int, default=10000)
    p.add_argument('--k', type=int, default=10)
    p.add_argument('--trials', type=int, default=200)
    p.add_argument('--beta', type=float)
    p.add_argument('--workers', type=int)
    _add_outputs(p)

    p = commands.add_parser('bench-flip', help='database ordering flip rate')
    _add_common(p)
    p.add_argument('--dim', type=int)
    p.add_argument('--margin', type=float, nargs='+', default=[1.01])
    p.add_argument('--trials', type=int, default=100000)
    p.add_argument('--beta', type=float)
    p.add_argument('--pairing', choices=('db', 'query'), default='db')
    _add_outputs(p)

    return parser


def _load_keys(config):
    config.require('key', 'payload_key')
    return scheme_core.SchemeKey.load(config.key), payload_crypto.PayloadKey.load(config.payload_key)


def _context(config, scheme_key, payload_key, store, dim):
    return pipeline.ClientContext(scheme_key, payload_key, store, dim, k=config.k,
                                  radius=config.radius, seed=config.seed)


def _close(store):
    if hasattr(store, 'close'):
        store.close()


def _write_outputs(args, experiment, rows, params):
    if args.out:
        eval_harness.write_csv(rows, args.out)
    if args.manifest:
        eval_harness.append_manifest(args.manifest, {'experiment': experiment, 'params': params,
                                                     'rows': len(rows), 'out': args.out})


def _print_rows(rows):
    if not rows:
        return
    columns = list(rows[0])
    print('\t'.join(columns))
    for row in rows:
        print('\t'.join(f'{row[c]:.6g}' if isinstance(row[c], float) else str(row[c]) for c in columns))


def cmd_keygen(args, config):
    if config.seed is not None:
        raise ParameterError('keygen refuses --seed: keys must come from the system entropy source')
    config.require('key', 'payload_key')
    for path in (config.key, config.payload_key):
        if os.path.exists(path) and not args.force:
            raise ParameterError(f"{path} exists; pass --force to overwrite it")
    scheme_key = scheme_core.keygen(beta=config.beta, s_range=(args.s_min, args.s_max))
    scheme_key.save(config.key)
    payload_crypto.payload_keygen().save(config.payload_key)
    print(f'wrote scheme key {config.key} (beta={config.beta}) and payload key {config.payload_key}')
    return 0


def _documents(config, path, texts):
    embedder = pipeline.HashEmbedder(config.dim or DEFAULT_HASH_DIM)
    return pipeline.load_documents(path, config.format, texts_path=texts, embedder=embedder)


def cmd_ingest(args, config):
    scheme_key, payload_key = _load_keys(config)
    if config.endpoint is None:
        raise ConfigError('missing required setting(s): --store or --addr')
    documents = _documents(config, args.docs, args.texts)
    if not documents:
        raise utils.InputError(f"{args.docs} holds no documents")
    dim = documents[0].embedding.shape[0]
    store = pipeline.open_store(config.endpoint, dim, workers=config.workers)
    try:
        report = pipeline.phase1_upload(_context(config, scheme_key, payload_key, store, dim), documents)
    finally:
        _close(store)
    print(f'ingested {report.count} documents ({report.bytes} bytes)')
    if report.rejected:
        for rid, reason in sorted(report.rejected.items(), key=lambda item: str(item[0])):
            print(f'rejected {rid}: {reason}')
        raise IngestRejected(f"{len(report.rejected)} document(s) rejected",
                             details={'ids': list(report.rejected)})
    return 0


def cmd_serve(args, config):
    config.require('store', 'addr')
    counts = net_service.serve(config.store, config.addr, dim=config.dim, workers=config.workers,
                               max_frame=config.max_frame)
    print('requests served:', json.dumps(counts, sort_keys=True))
    return 0


def cmd_query(args, config):
    scheme_key, payload_key = _load_keys(config)
    if config.endpoint is None:
        raise ConfigError('missing required setting(s): --store or --addr')
    if config.addr:
        store = net_service.RemoteStore(config.addr)
    elif os.path.exists(config.store):
        store = StoreIndex.load(config.store, workers=config.workers)
    else:
        raise utils.InputError(f"store file {config.store} not found")
    try:
        dim = store.dim
        if args.text is not None:
            query_text = args.text
            embedding = pipeline.HashEmbedder(dim).embed(query_text)
        else:
            with open(args.query_embedding, encoding='utf-8') as f:
                embedding = utils.as_vector(json.load(f), dim, name='query embedding')
            query_text = ''
        ctx = _context(config, scheme_key, payload_key, store, dim)
        result = pipeline.phase2_query(ctx, embedding, query_text=query_text)
    finally:
        _close(store)

    print(pipeline.phase3_prompt(query_text, result.documents), end='')
    print(f"k={result.k} k'={result.k_prime}")
    for doc in result.documents:
        print(f'{doc.id}\t{doc.distance:.9f}')

    if args.oracle_docs:
        documents = _documents(replace(config, dim=dim), args.oracle_docs, args.texts)
        for rid, distance in pipeline.plaintext_topk(documents, embedding, result.k):
            print(f'oracle {rid}\t{distance:.9f}')
    return 0


def cmd_kprime(args, config):
    rows = eval_harness.run_kprime_table(args.n, args.r, args.k, args.m, mapping=args.mapping)
    _print_rows(rows)
    _write_outputs(args, 'kprime', rows, {'n': args.n, 'r': args.r, 'k': args.k, 'm': args.m,
                                          'mapping': args.mapping})
    return 0


def cmd_bench_throughput(args, config):
    reports = eval_harness.run_throughput(args.dims, args.batch, args.repeats, seed=config.seed)
    rows = eval_harness.report_rows(reports)
    _print_rows(rows)
    _write_outputs(args, 'throughput', rows, {'dims': args.dims, 'batch': args.batch,
                                              'repeats': args.repeats, 'seed': config.seed})
    return 0


def cmd_bench_asr(args, config):
    reports = [eval_harness.run_asr(dim, args.m, args.k, args.trials, beta=config.beta,
                                    seed=config.seed, workers=config.workers)
               for dim in args.dims]
    rows = eval_harness.report_rows(reports)
    _print_rows(rows)
    _write_outputs(args, 'asr', rows, {'dims': args.dims, 'm': args.m, 'k': args.k,
                                       'trials': args.trials, 'beta': config.beta, 'seed': config.seed})
    return 0


def cmd_bench_flip(args, config):
    dim = config.dim or 2
    reports = [eval_harness.run_flip_rate(dim, margin, args.trials, beta=config.beta, seed=config.seed,
                                          pairing=args.pairing)
               for margin in args.margin]
    rows = eval_harness.report_rows(reports)
    _print_rows(rows)
    _write_outputs(args, 'flip', rows, {'dim': dim, 'margins': args.margin, 'trials': args.trials,
                                        'beta': config.beta, 'pairing': args.pairing,
                                        'seed': config.seed})
    return 0


COMMANDS = {
    'keygen': cmd_keygen,
    'ingest': cmd_ingest,
    'serve': cmd_serve,
    'query': cmd_query,
    'kprime': cmd_kprime,
    'bench-throughput': cmd_bench_throughput,
    'bench-asr': cmd_bench_asr,
    'bench-flip': cmd_bench_flip,
}


def main(argv=None, environ=None):
    """
    Run one command.

    Parameters:
    argv (list of str, optional): Arguments without the program name, sys.argv[1:] by default.
    environ (dict, optional): Environment used to find the config file.

    Returns:
    int: Process exit code.
    """
    args = build_parser().parse_args(argv)
    try:
        config = CliConfig.build(args, environ)
        utils.setup_logging(config.log_level.upper(), config.log_file)
        return COMMANDS[args.command](args, config)
    except PpragError as e:
        logger.debug('command %s failed: %s', args.command, e.asdict())
        print(f'error {e.code}: {e.message}', file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f'error {utils.InputError.code}: {e}', file=sys.stderr)
        return utils.InputError.exit_code
    except Exception as e:
        logger.exception('unexpected failure')
        print(f'error INTERNAL: {e}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
