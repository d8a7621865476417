"""
Synthetic Fiscal Corpus
=======================

Deterministic DIF corpus with the composition of a real multi-authority tax
document collection: 145 IRS, 85 CA-FTB and 68 NY-Tax documents of varying
length, with section headings, line-item tables and OCR-extracted image text.

Used to check that the chunking pipeline yields a realistic chunk volume
and to produce offline demo stores:

    python synthetic_corpus.py --out corpus/ --seed 7
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

COMPOSITION = {"IRS": 145, "CA-FTB": 85, "NY-Tax": 68}

DOC_TYPES = {
    "IRS": ["form", "instructions", "publication"],
    "CA-FTB": ["form", "instructions", "publication"],
    "NY-Tax": ["instructions", "guideline", "publication"],
}

VOCAB = np.array((
    "taxpayer income deduction credit return filing schedule line amount total adjusted gross "
    "withholding estimated payment refund penalty interest resident nonresident partnership "
    "corporation trust estate dependent exemption standard itemized wages salaries tips dividends "
    "capital gains losses depreciation basis property business expenses qualified retirement "
    "contribution distribution account employer employee self employment social security medicare "
    "federal state local jurisdiction franchise board department revenue form instructions "
    "publication worksheet enter subtract multiply attach report allowable limit threshold phase "
    "out year period election extension due date amended original liability balance owed"
).split())

SECTION_TITLES = [
    "General Instructions", "Who Must File", "Filing Requirements", "Income", "Adjustments to Income",
    "Deductions", "Credits", "Other Taxes", "Payments", "Refund or Amount Owed", "Penalties and Interest",
    "Recordkeeping", "Definitions", "Line Instructions", "Worksheets", "Special Rules",
]

TABLE_HEADERS = [
    ["Line", "Description", "Amount"],
    ["Filing status", "Threshold", "Phase-out"],
    ["Code", "Item", "Rate", "Limit"],
]


def _sentence(rng: np.random.Generator) -> str:
    words = rng.choice(VOCAB, size=int(rng.integers(8, 21)))
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


def _paragraph(rng: np.random.Generator, target_chars: int) -> str:
    sentences = []
    length = 0
    while length < target_chars:
        s = _sentence(rng)
        sentences.append(s)
        length += len(s) + 1
    return " ".join(sentences)


def _table(rng: np.random.Generator) -> Dict:
    headers = list(TABLE_HEADERS[int(rng.integers(len(TABLE_HEADERS)))])
    rows = []
    for i in range(int(rng.integers(3, 7))):
        row = [f"{i + 1}"] + [" ".join(rng.choice(VOCAB, size=2)) for _ in headers[1:-1]]
        row.append(f"{int(rng.integers(100, 50000)):,}")
        # ragged rows exercise padding
        if rng.random() < 0.1:
            row = row[:-1]
        rows.append(row)
    return {"kind": "table", "headers": headers, "rows": rows,
            "caption": f"Table {int(rng.integers(1, 20))}. {' '.join(rng.choice(VOCAB, size=3)).title()}"}


def _page_blocks(rng: np.random.Generator, chars_per_page: int, first: bool) -> List[Dict]:
    blocks: List[Dict] = []
    budget = int(chars_per_page * rng.uniform(0.7, 1.3))
    if first or rng.random() < 0.3:
        title = SECTION_TITLES[int(rng.integers(len(SECTION_TITLES)))]
        blocks.append({"kind": "text", "section_title": title, "text": _paragraph(rng, 300)})
        budget -= 300
    if rng.random() < 0.2:
        blocks.append(_table(rng))
        budget -= 250
    if rng.random() < 0.1:
        blocks.append({"kind": "image_text", "ocr_text": _paragraph(rng, 150),
                       "descriptor": "scanned worksheet, lower half of page"})
        budget -= 150
    while budget > 0:
        size = int(rng.integers(300, 700))
        blocks.append({"kind": "text", "text": _paragraph(rng, size)})
        budget -= size
    # whitespace-only extraction artifacts are dropped at ingest
    if rng.random() < 0.05:
        blocks.append({"kind": "text", "text": "   "})
    return blocks


def generate_document(rng: np.random.Generator, doc_id: str, authority: str, doc_type: str,
                      n_pages: int, chars_per_page: int = 2800) -> Dict:
    pages = [{"page_number": p, "blocks": _page_blocks(rng, chars_per_page, first=p == 1)}
             for p in range(1, n_pages + 1)]
    title = f"{authority} {doc_type.title()} {' '.join(rng.choice(VOCAB, size=2)).title()}"
    return {"doc_id": doc_id, "authority": authority, "doc_type": doc_type, "title": title, "pages": pages}


def generate_corpus(seed: int = 7, composition: Optional[Dict[str, int]] = None, median_pages: float = 8.0,
                    sigma: float = 0.8, max_pages: int = 120, chars_per_page: int = 2800) -> List[Dict]:
    """DIF dicts ordered by doc_id; page counts are log-normal around median_pages"""
    rng = np.random.default_rng(seed)
    docs = []
    for authority, count in (composition or COMPOSITION).items():
        prefix = authority.lower().replace("-", "")
        for i in range(count):
            n_pages = int(np.clip(round(rng.lognormal(np.log(median_pages), sigma)), 1, max_pages))
            doc_type = DOC_TYPES[authority][int(rng.integers(len(DOC_TYPES[authority])))]
            docs.append(generate_document(rng, f"{prefix}-{i + 1:04d}", authority, doc_type,
                                          n_pages, chars_per_page))
    docs.sort(key=lambda d: d["doc_id"])
    return docs


def write_corpus(out_dir: Union[str, Path], docs: List[Dict]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        (out / f"{doc['doc_id']}.json").write_text(json.dumps(doc, ensure_ascii=False, indent=1),
                                                   encoding="utf-8")
    logger.info(f"Wrote {len(docs)} DIF documents to {out}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description="Generate a synthetic DIF corpus")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--scale", type=float, default=1.0, help="multiply document counts")
    args = parser.parse_args()
    counts = {a: max(1, int(round(n * args.scale))) for a, n in COMPOSITION.items()}
    write_corpus(args.out, generate_corpus(seed=args.seed, composition=counts))
