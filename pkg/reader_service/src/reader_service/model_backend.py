"""Optional backend wrapping a pretrained extractive-QA model.

Requires the [model] extra (transformers + torch). The answer head supplies
s_best (best-span score) and s_null (no-answer score from the null logits);
token vectors come from the encoder's last hidden state, averaged over the
subwords of each whitespace token. Score scales are model-specific and only
comparable within one model.

Backward reading reuses the forward model on the reverse-question surface; a
dedicated fine-tuned backward model can be dropped in by pointing model_id at
it.
"""

from __future__ import annotations

import numpy as np

from tablefill.corpus import Passage
from tablefill.readers import AnswerSpan, ReaderContract, TokenEncoding


class PretrainedReader(ReaderContract):
    def __init__(self, model_id: str, d: int | None = None, max_length: int = 384):
        try:
            import torch
            from transformers import AutoModelForQuestionAnswering, AutoTokenizer
        except ImportError as exc:
            raise RuntimeError(
                "model mode needs the [model] extra: pip install 'reader-service[model]'"
            ) from exc
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_id, use_fast=True)
        self.model = AutoModelForQuestionAnswering.from_pretrained(model_id)
        self.model.eval()
        self.max_length = max_length
        self._d = int(self.model.config.hidden_size)
        if d is not None and d != self._d:
            raise ValueError(
                f"configured dim {d} != model hidden size {self._d}; omit --dim for model mode"
            )

    def dim(self) -> int:
        return self._d

    def _encode_inputs(self, question: str, passage: Passage):
        return self.tokenizer(
            question,
            list(passage.tokens),
            is_split_into_words=True,
            truncation="only_second",
            max_length=self.max_length,
            return_tensors="pt",
        )

    def read(self, question: str, passage: Passage) -> AnswerSpan:
        torch = self._torch
        inputs = self._encode_inputs(question, passage)
        with torch.no_grad():
            out = self.model(**inputs)
        start_logits = out.start_logits[0]
        end_logits = out.end_logits[0]
        word_ids = inputs.word_ids(0)
        sequence_ids = inputs.sequence_ids(0)
        # null score: both heads pointing at the first special token
        s_null = float(start_logits[0] + end_logits[0])
        best = None
        n = len(word_ids)
        for i in range(n):
            if sequence_ids[i] != 1:
                continue
            for j in range(i, min(i + 30, n)):
                if sequence_ids[j] != 1:
                    break
                score = float(start_logits[i] + end_logits[j])
                if best is None or score > best[0]:
                    best = (score, i, j)
        if best is None or best[0] <= s_null:
            return AnswerSpan.null(passage.passage_id, best[0] if best else s_null, s_null)
        score, i, j = best
        start_word = word_ids[i]
        end_word = word_ids[j]
        text = " ".join(passage.tokens[start_word : end_word + 1])
        return AnswerSpan.make(passage.passage_id, start_word, end_word, text, score, s_null)

    def encode(self, question: str, passage: Passage) -> TokenEncoding:
        torch = self._torch
        inputs = self._encode_inputs(question, passage)
        with torch.no_grad():
            hidden = self.model.base_model(
                input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
            ).last_hidden_state[0]
        word_ids = inputs.word_ids(0)
        sequence_ids = inputs.sequence_ids(0)
        q_tokens = question.split()
        q_rows = np.zeros((len(q_tokens), self._d))
        p_rows = np.zeros((len(passage.tokens), self._d))
        counts_q = np.zeros(len(q_tokens))
        counts_p = np.zeros(len(passage.tokens))
        vectors = hidden.numpy()
        for pos, (wid, sid) in enumerate(zip(word_ids, sequence_ids)):
            if wid is None:
                continue
            if sid == 0 and wid < len(q_tokens):
                q_rows[wid] += vectors[pos]
                counts_q[wid] += 1
            elif sid == 1 and wid < len(passage.tokens):
                p_rows[wid] += vectors[pos]
                counts_p[wid] += 1
        q_rows[counts_q > 0] /= counts_q[counts_q > 0, None]
        p_rows[counts_p > 0] /= counts_p[counts_p > 0, None]
        return TokenEncoding(
            question_vectors=q_rows,
            passage_vectors=p_rows,
            cls_vector=vectors[0].copy(),
            d=self._d,
        )
