"""Exception hierarchy shared by every layer.

Each exception carries a wire ``code`` so services can turn it into an
``ERROR{code, message}`` envelope without a lookup table.
"""


class CDSError(Exception):
    code = "INTERNAL"

    def __init__(self, message="", code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    @property
    def message(self):
        return str(self)


class InvalidArgument(CDSError, ValueError):
    code = "BAD_REQUEST"


class CorruptManifest(CDSError):
    code = "CORRUPT_MANIFEST"


class DecryptionFailure(CDSError):
    code = "DECRYPTION_FAILED"


class EntropyFailure(CDSError):
    code = "INTERNAL"


# codec
class NeedMoreData(CDSError):
    code = "MALFORMED"


class FrameTooLarge(CDSError):
    code = "TOO_LARGE"


class ParseError(CDSError):
    code = "MALFORMED"


class ProtocolError(CDSError):
    code = "PROTOCOL"


# services
class Conflict(CDSError):
    code = "CONFLICT"


class NotFound(CDSError):
    code = "NOT_FOUND"


class Forbidden(CDSError):
    code = "FORBIDDEN"


class TrustDenied(CDSError):
    code = "TRUST_DENIED"


class StoreFailed(CDSError):
    code = "STORE_FAILED"


class IntegrityAlarm(CDSError):
    code = "INTEGRITY_ALARM"


class KeyExhausted(CDSError):
    code = "KEY_EXHAUSTED"


class AuditInconclusive(CDSError):
    code = "AUDIT_INCONCLUSIVE"


class CorruptStore(CDSError):
    code = "CORRUPT_STORE"


class TransportError(CDSError, ConnectionError):
    code = "UPSTREAM"


class RemoteError(CDSError):
    """An ``ERROR`` envelope received from a peer, re-raised locally."""


class AuthRejected(CDSError):
    code = "AUTH_REJECTED"
