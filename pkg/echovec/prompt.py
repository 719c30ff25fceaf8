#!/usr/bin/env python3
#
# prompt.py - part of the echovec embedding tools
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

"""One-word prompts, in-context exemplars and exemplar selection."""

import dataclasses
import enum
import json
import logging
import re
from pathlib import Path

from . import _
from . import common
from .exception import (BackendException, BackendUnavailable, InsufficientCandidates,
                        InvalidInput, MissingExemplars, ProtocolError)
from .vectors import Modality

TEXT_ONE_WORD = 'Summarize the caption sentence in one word:'
AUDIO_ONE_WORD = 'Summarize the caption of the audio in one word:'
TEXT_PLAIN = 'Summarize the caption sentence:'
AUDIO_PLAIN = 'Summarize the caption of the audio:'
AUDIO_MARKER = '<audio>'

DEFAULT_BUDGET = (65, 35)
DEFAULT_RETAIN = 200

DEMO_EXEMPLARS = Path(__file__).parent / 'data' / 'demo_exemplars.json'

STOPWORDS = frozenset([
    'a', 'an', 'the', 'and', 'or', 'but', 'of', 'in', 'on', 'at',
    'to', 'from', 'with', 'by', 'for', 'as', 'into', 'over', 'is', 'are',
    'was', 'were', 'be', 'been', 'being', 'it', 'its', 'this', 'that', 'these',
    'those', 'there', 'then', 'while', 'some', 'someone', 'something', 'very', 'up', 'down',
    'out', 'loudly', 'softly', 'quietly', 'slowly', 'quickly', 'continuously', 'repeatedly',
    'background', 'distance',
])

_TOKEN_RE = re.compile(r"[\w']+")
_PUNCTUATION = '"\'`.,;:!?()[]{}<>'


class PromptVariant(enum.Enum):
    PLAIN = 'Plain'
    ONE_WORD = 'OneWord'
    ONE_WORD_WITH_EXEMPLARS = 'OneWordWithExemplars'

    @property
    def needs_exemplars(self):
        return self is PromptVariant.ONE_WORD_WITH_EXEMPLARS


@dataclasses.dataclass
class Exemplar:
    modality: Modality
    content: str
    summary: str
    score: float = 0.0
    item_id: str = None
    reference: str = None

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        if not self.summary or any(c.isspace() for c in self.summary):
            raise InvalidInput(_("One-word summary must be a single token, got {summary!r}")
                               .format(summary=self.summary))
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInput(_("Fidelity score {score} is outside [0, 1]")
                               .format(score=self.score))
        if self.item_id is None:
            self.item_id = self.content

    def to_dict(self):
        d = {
            'modality': self.modality.label,
            'content': self.content,
            'summary': self.summary,
            'score': self.score,
        }
        if self.reference is not None:
            d['reference'] = self.reference
        return d


def _rank_key(exemplar):
    return (-exemplar.score, exemplar.item_id)


class ExemplarSet:
    """Selected teaching exemplars, text and audio, with their budget."""

    def __init__(self, text_exemplars, audio_exemplars, budget=None):
        self.text_exemplars = list(text_exemplars)
        self.audio_exemplars = list(audio_exemplars)
        if budget is None:
            budget = (len(self.text_exemplars), len(self.audio_exemplars))
        self.budget = tuple(budget)
        if self.budget != (len(self.text_exemplars), len(self.audio_exemplars)):
            raise InvalidInput(_("Exemplar counts {counts} do not match budget {budget}")
                               .format(counts=(len(self.text_exemplars),
                                               len(self.audio_exemplars)),
                                       budget=self.budget))
        if any(e.modality is not Modality.TEXT for e in self.text_exemplars) \
           or any(e.modality is not Modality.AUDIO for e in self.audio_exemplars):
            raise InvalidInput(_("Exemplar listed under the wrong modality"))

    def ordered(self):
        """Text exemplars first, then audio, each by descending score."""
        return sorted(self.text_exemplars, key=_rank_key) \
            + sorted(self.audio_exemplars, key=_rank_key)

    def to_json(self):
        return common.dumps_json([e.to_dict() for e in self.ordered()])

    def write(self, path):
        common.write_atomic(path, self.to_json())

    @classmethod
    def from_list(cls, data):
        if not isinstance(data, list):
            raise InvalidInput(_("An exemplar set is a JSON array"))
        text, audio = [], []
        for i, entry in enumerate(data):
            try:
                exemplar = Exemplar(Modality.parse(entry['modality']), entry['content'],
                                    entry['summary'], float(entry['score']),
                                    reference=entry.get('reference'))
            except (KeyError, TypeError, ValueError) as e:
                raise InvalidInput(_("Exemplar #{i} is malformed").format(i=i), str(e)) from e
            (text if exemplar.modality is Modality.TEXT else audio).append(exemplar)
        return cls(text, audio)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as fp:
            try:
                data = json.load(fp)
            except ValueError as e:
                raise InvalidInput(_("'{path}' is not valid JSON").format(path=path),
                                   str(e)) from e
        return cls.from_list(data)


def load_exemplars(config):
    """Return the ExemplarSet a config asks for, or the bundled demo set."""
    path = config.get('exemplars_path')
    if path:
        return ExemplarSet.load(path)
    logging.debug(_("No exemplar set configured, using the bundled demo set"))
    return ExemplarSet.load(DEMO_EXEMPLARS)


def _instruction(modality, variant):
    if modality is Modality.TEXT:
        return TEXT_PLAIN if variant is PromptVariant.PLAIN else TEXT_ONE_WORD
    return AUDIO_PLAIN if variant is PromptVariant.PLAIN else AUDIO_ONE_WORD


def _demonstration(exemplar, audio_exemplars_as):
    if exemplar.modality is Modality.TEXT:
        return '{content} {instruction} {summary}'.format(
            content=exemplar.content, instruction=TEXT_ONE_WORD, summary=exemplar.summary)
    if audio_exemplars_as == 'reference' and exemplar.reference:
        payload = exemplar.reference
    else:
        payload = AUDIO_MARKER + exemplar.content
    return '{payload} {instruction} {summary}'.format(
        payload=payload, instruction=AUDIO_ONE_WORD, summary=exemplar.summary)


def render_prompt(item, modality, variant, exemplars=None, audio_exemplars_as='caption'):
    """Render the embedding prompt for one item.

    The item payload (caption text or audio reference) comes first,
    followed by the instruction whose last token's hidden state becomes
    the embedding.  With exemplars, one demonstration line per exemplar
    (text before audio, best score first) precedes the query line, and an
    audio query carries the same marker as the audio demonstrations.
    """
    modality = Modality.parse(modality)
    variant = PromptVariant(variant)
    instruction = _instruction(modality, variant)
    if not variant.needs_exemplars:
        return '{item} {instruction}'.format(item=item, instruction=instruction)
    if exemplars is None:
        raise MissingExemplars(_("Prompt variant {variant} needs an exemplar set")
                               .format(variant=variant.value))
    if modality is Modality.AUDIO and audio_exemplars_as != 'reference':
        # tagged like the audio demonstrations
        item = AUDIO_MARKER + item
    line = '{item} {instruction}'.format(item=item, instruction=instruction)
    demos = [_demonstration(e, audio_exemplars_as) for e in exemplars.ordered()]
    return '\n'.join(demos + [line])


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


def first_token(text):
    """Reduce a free-form model answer to its first whitespace-free token."""
    for token in text.split():
        token = token.strip(_PUNCTUATION)
        if token:
            return token
    return ''


class FallbackSummarizer:
    """Longest token that is not a stopword, lowercased, earliest on ties."""

    def summarize(self, caption):
        tokens = tokenize(caption)
        if not tokens:
            raise InvalidInput(_("Cannot summarize an empty caption"))
        candidates = [t for t in tokens if t not in STOPWORDS] or tokens
        best = candidates[0]
        for token in candidates[1:]:
            if len(token) > len(best):
                best = token
        return best


def _common_prefix(a, b):
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


class FallbackScorer:
    """Substring or shared-stem overlap between a summary and its caption."""

    def score(self, summary, caption):
        summary = summary.lower().strip(_PUNCTUATION)
        tokens = tokenize(caption)
        if not summary or not tokens:
            return 0.0
        if summary in caption.lower():
            return 1.0
        return max(_common_prefix(summary, t) / max(len(summary), len(t)) for t in tokens)


class ChatSummarizer:
    def __init__(self, client):
        self.client = client

    def summarize(self, caption):
        return self.client.complete('{caption} {instruction}'.format(
            caption=caption, instruction=TEXT_ONE_WORD))


# a standalone number in [0, 1]; "8/10" or "1.5" do not match
_SCORE_RE = re.compile(r'(?<![\w./])(?:1(?:\.0+)?|0(?:\.\d+)?|\.\d+)(?!\.?\d|\w|/)')


class ChatScorer:
    PROMPT = ('Rate from 0 to 1 how faithfully the one-word summary "{summary}" '
              'captures the meaning of the caption "{caption}". '
              'Answer with the number only.')

    def __init__(self, client):
        self.client = client

    def score(self, summary, caption):
        answer = self.client.complete(self.PROMPT.format(summary=summary, caption=caption))
        m = _SCORE_RE.search(answer)
        if not m:
            raise ProtocolError(_("Scorer answered without a score: {answer!r}")
                                .format(answer=answer[:200]))
        return float(m.group(0))


def generate_candidate_summaries(items, summarizer=None, modality=Modality.TEXT,
                                 item_ids=None, fallback=True, max_parallel=1):
    """Produce one unscored Exemplar per caption.

    Multi-token answers are cut down to their first token.  A failing
    summarizer is replaced by the fallback rule for that item when
    fallback is enabled, otherwise BackendUnavailable is raised.
    """
    modality = Modality.parse(modality)
    items = list(items)
    if item_ids is None:
        item_ids = list(items)
    if len(item_ids) != len(items):
        raise InvalidInput(_("Got {n} item ids for {m} items")
                           .format(n=len(item_ids), m=len(items)))
    if summarizer is None:
        summarizer = FallbackSummarizer()
    rule = FallbackSummarizer()

    def _summarize(caption):
        try:
            summary = first_token(summarizer.summarize(caption))
            if not summary:
                raise ProtocolError(_("Summarizer returned an empty answer"))
            return summary
        except BackendException as e:
            if not fallback:
                raise BackendUnavailable(_("Summarizer failed on {caption!r}")
                                         .format(caption=caption), str(e)) from e
            logging.warning(_("Summarizer failed ({error}), using fallback rule")
                            .format(error=e))
            return rule.summarize(caption)

    summaries = common.ordered_map(_summarize, items, max_parallel)
    return [Exemplar(modality, caption, summary, 0.0, item_id)
            for caption, summary, item_id in zip(items, summaries, item_ids)]


def score_and_select(candidates, scorer=None, retain=DEFAULT_RETAIN, budget=DEFAULT_BUDGET,
                     fallback=True, max_parallel=1):
    """Score candidates for fidelity, keep the best and fill the budget.

    The top `retain` candidates by score survive, then the best n_text
    text and n_audio audio exemplars among them are taken.  Ties go to
    the lexicographically smaller item id, so the result does not
    depend on the order of the candidate list.
    """
    candidates = list(candidates)
    ids = [c.item_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise InvalidInput(_("Candidate item ids must be unique"))
    n_text, n_audio = budget
    if scorer is None:
        scorer = FallbackScorer()
    rule = FallbackScorer()

    def _score(candidate):
        try:
            value = float(scorer.score(candidate.summary, candidate.content))
        except BackendException as e:
            if not fallback:
                raise BackendUnavailable(_("Scorer failed on {item_id!r}")
                                         .format(item_id=candidate.item_id), str(e)) from e
            logging.warning(_("Scorer failed ({error}), using fallback rule").format(error=e))
            value = rule.score(candidate.summary, candidate.content)
        return dataclasses.replace(candidate, score=min(1.0, max(0.0, value)))

    scored = common.ordered_map(_score, candidates, max_parallel)
    kept = sorted(scored, key=_rank_key)[:retain]
    text = [c for c in kept if c.modality is Modality.TEXT][:n_text]
    audio = [c for c in kept if c.modality is Modality.AUDIO][:n_audio]
    for label, got, wanted in (('text', text, n_text), ('audio', audio, n_audio)):
        if len(got) < wanted:
            raise InsufficientCandidates(
                _("Only {got} {modality} candidates survive, {wanted} needed")
                .format(got=len(got), modality=label, wanted=wanted))
    logging.info(_("Selected {n_text} text and {n_audio} audio exemplars out of {total}")
                 .format(n_text=n_text, n_audio=n_audio, total=len(candidates)))
    return ExemplarSet(text, audio, (n_text, n_audio))
