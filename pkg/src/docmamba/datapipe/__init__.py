from docmamba.datapipe.batching import Batch, bucket_batches, bucket_length, max_bucket_length
from docmamba.datapipe.document import (
    Document, Word, document_from_dict, dump_document, funsd_to_document, load_document,
    read_document, write_document,
)
from docmamba.datapipe.encoding import (
    MAX_LENGTH, TagSet, TokenizedSequence, chunk_sequence, tokenize_document, word_predictions,
)
from docmamba.datapipe.masking import MaskingPolicy, apply_mlm_mask
from docmamba.datapipe.synth import GrammarConfig, synth_corpus, synth_document

__all__ = [
    "Batch", "Document", "GrammarConfig", "MAX_LENGTH", "MaskingPolicy", "TagSet",
    "TokenizedSequence", "Word", "apply_mlm_mask", "bucket_batches", "bucket_length",
    "chunk_sequence", "document_from_dict", "dump_document", "funsd_to_document",
    "load_document", "max_bucket_length", "read_document", "synth_corpus", "synth_document",
    "tokenize_document", "word_predictions", "write_document",
]
