import logging
import re
from src.config import P2I_LOG_FILE, P2I_LOG_LEVEL
from src.log_sanitizer import sanitized_formatter

# Math symbols that show up in loss and metric messages
_ASCII_REPLACEMENTS = {
    '→': '->',
    '←': '<-',
    '≥': '>=',
    '≤': '<=',
    '≠': '!=',
    '±': '+/-',
    '×': 'x',
    '·': '*',
    '…': '...',
    '—': '--',
    '–': '-',
    'λ': 'lambda',
    'ε': 'eps',
    '∞': 'inf',
    '²': '^2',
}


def ensure_ascii(message):
    """Map known symbols to ASCII spellings and drop anything else non-ASCII."""
    for unicode_char, ascii_char in _ASCII_REPLACEMENTS.items():
        message = message.replace(unicode_char, ascii_char)
    return re.sub(r'[^\x00-\x7F]+', '', message)


logger = logging.getLogger('Point2Insert')
logger.setLevel(getattr(logging, P2I_LOG_LEVEL.upper(), logging.INFO))
logger.propagate = False

for handler in logger.handlers[:]:
    logger.removeHandler(handler)

console_handler = logging.StreamHandler()
console_handler.setFormatter(sanitized_formatter)
logger.addHandler(console_handler)

if P2I_LOG_FILE:
    file_handler = logging.FileHandler(P2I_LOG_FILE)
    file_handler.setFormatter(sanitized_formatter)
    logger.addHandler(file_handler)


def log_info(message):
    logger.info(ensure_ascii(str(message)))


def log_error(message):
    from src.log_sanitizer import log_error_with_tracking
    log_error_with_tracking(logger, ensure_ascii(str(message)))


def log_warning(message):
    from src.log_sanitizer import log_warning_with_tracking
    log_warning_with_tracking(logger, ensure_ascii(str(message)))


def alert_step(stage, step, breakdown):
    message = (f"[STAGE {stage}] step {step}: total={breakdown.total:.6f} "
               f"fm={breakdown.l_fm:.6f} etd={breakdown.l_etd:.6f} pa={breakdown.l_pa:.6f}")
    ascii_message = ensure_ascii(message)
    logger.info(ascii_message)
    return ascii_message


def alert_error(component, error):
    message = f"[ERROR] {component}: {error}"
    ascii_message = ensure_ascii(message)
    logger.error(ascii_message)
    return ascii_message
