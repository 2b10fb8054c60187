class RSAError(Exception):
    """
    Base class for all errors raised by layer_rsa.
    """

    category: str = "error"

    def __init__(self, message: str, kind: str | None = None):
        super().__init__(message)
        self.message = message
        self.kind = kind or message.replace(" ", "_")

    def to_record(self) -> dict[str, str]:
        """
        Machine-readable form of the error, as printed by the CLI.

        Returns:
            Dictionary with the error category, kind and message
        """
        return {"error": self.category, "kind": self.kind, "message": self.message}


class ValidationError(RSAError, ValueError):
    """
    Input data is malformed or inconsistent with the analysis.
    """

    category = "validation"


class InputError(RSAError, OSError):
    """
    Input file is missing, unreadable or not in the expected format.
    """

    category = "io"
