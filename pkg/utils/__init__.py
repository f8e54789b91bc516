from utils.utils import create_logger, atomic_write_bytes, atomic_write_text, file_sha256
