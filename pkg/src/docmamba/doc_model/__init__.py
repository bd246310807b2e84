from docmamba.doc_model.checkpoint import load_checkpoint, save_checkpoint
from docmamba.doc_model.config import ModelConfig
from docmamba.doc_model.embeddings import embed_2d_position, embed_tokens, normalize_box
from docmamba.doc_model.heads import IGNORE_INDEX, cross_entropy, mlm_logits, tag_logits
from docmamba.doc_model.metrics import entity_f1, get_entities
from docmamba.doc_model.model import DocMamba, TokenRecord, parameter_family
from docmamba.doc_model.tokenizer import ByteTokenizer, SpecialTokens, Tokenizer

__all__ = [
    "ByteTokenizer", "DocMamba", "IGNORE_INDEX", "ModelConfig", "SpecialTokens", "TokenRecord",
    "Tokenizer", "cross_entropy", "embed_2d_position", "embed_tokens", "entity_f1",
    "get_entities", "load_checkpoint", "mlm_logits", "normalize_box", "parameter_family",
    "save_checkpoint", "tag_logits",
]
