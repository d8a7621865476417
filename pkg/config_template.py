"""
Configuration Template for CiteGuard
====================================

Copy this file to config.py and adjust. Command-line flags and the
CITEGUARD_EMBED_URL / CITEGUARD_LLM_URL / CITEGUARD_API_KEY environment
variables take precedence over these values.
"""

CONFIG = {
    # Providers - 'mock' runs fully offline (hashed bag-of-words embeddings, extractive answers)
    'embed_url': 'mock',  # e.g., 'http://localhost:8090'
    'llm_url': 'mock',
    'embed_model': 'BAAI/bge-large-en-v1.5',
    'llm_model': 'meta-llama/Llama-3.2-3B-Instruct',
    'mock_dim': 64,

    # Provider HTTP
    'timeout_ms': 30000,
    'max_batch': 32,
    'max_retries': 2,
    'backoff_ms': 250,

    # Retrieval & abstention
    'k': 5,
    'tau': 0.55,  # Abstain when the best cosine falls below this (depends on the embedding model)

    # Generation
    'max_attempts': 3,  # Regenerations before abstaining on invalid citations
    'max_tokens': 512,
    'temperature': 0.0,
    'enforce_citations': True,  # False runs the unenforced baseline (eval run --no-enforcement)

    # Chunking (characters)
    'chunk_target_len': 1000,
    'chunk_max_len': 1400,
    'chunk_overlap_len': 150,
    'chunk_min_len': 200,

    # Workers
    'ingest_workers': 4,
    'eval_parallelism': 4,

    # Logging
    'log_file': 'citeguard.log',
    'debug_mode': False,
}
