#!/usr/bin/env python3
#
# benchmark.py - part of the echovec embedding tools
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

"""Long-caption and conditional-retrieval benchmark builders.

Both builders take an optional LLM client and fall back to fixed,
deterministic rules without one, so benchmarks can be built offline.
"""

import csv
import dataclasses
import io
import logging
import os
import wave

import numpy as np

from . import _
from . import common
from .exception import BackendException, BackendUnavailable, FormatMismatch, \
    InsufficientPool, InvalidInput, ProtocolError

LONG_CAPTION_PROMPT = (
    "You will be given five short textual descriptions that correspond to a single clip. "
    "Your task is to merge these five descriptions into a single, coherent paragraph. "
    "The paragraph should be a reorganization and expansion of the original descriptions "
    "without adding any new information or altering the original meaning. Ensure the content "
    "is rich, but the meaning of each individual description must be preserved. The paragraph "
    "should flow naturally and read as a cohesive, well-structured piece of text. Make sure the "
    "final output is a smooth, connected paragraph that incorporates all five descriptions in "
    "a meaningful and coherent way."
)

CONDITIONAL_PROMPT = (
    "You will be given one key label and three useless labels, you should design the prompt "
    "to instruct the system to search for the main label but ignore the useless labels."
)

CONNECTIVES = ["Additionally,", "Meanwhile,", "At the same time,", "Throughout,"]

CAPTIONS_PER_CLIP = 5
DEFAULT_DISTRACTORS = 3
PEAK_TARGET = 10 ** (-1 / 20)
PCM_SCALE = 32767.0


def word_count(text):
    return len(text.split())


@dataclasses.dataclass
class CaptionGroup:
    clip_id: str
    captions: list

    def __post_init__(self):
        self.captions = list(self.captions)
        if len(self.captions) != CAPTIONS_PER_CLIP:
            raise InvalidInput(_("Clip '{clip_id}' has {n} captions, {want} expected")
                               .format(clip_id=self.clip_id, n=len(self.captions),
                                       want=CAPTIONS_PER_CLIP))
        if not all(isinstance(c, str) and c.strip() for c in self.captions):
            raise InvalidInput(_("Clip '{clip_id}' has an empty caption")
                               .format(clip_id=self.clip_id))


@dataclasses.dataclass
class LongCaptionRecord:
    clip_id: str
    paragraph: str
    word_count: int = None

    def __post_init__(self):
        self.word_count = word_count(self.paragraph)

    def to_dict(self):
        return {'clip_id': self.clip_id, 'paragraph': self.paragraph}


@dataclasses.dataclass
class MixManifest:
    sources: list
    duration: float = None

    def __post_init__(self):
        self.sources = [tuple(s) for s in self.sources]
        for clip_id, label, gain in self.sources:
            if not 0.0 < gain <= 1.0:
                raise InvalidInput(_("Gain {gain} of '{clip_id}' is outside (0, 1]")
                                   .format(gain=gain, clip_id=clip_id))

    def to_dict(self):
        return {
            'sources': [{'clip_id': c, 'label': lab, 'gain': g} for c, lab, g in self.sources],
            'duration': self.duration,
        }


@dataclasses.dataclass
class ConditionalRecord:
    mix_id: str
    key_label: str
    distractor_labels: list
    instruction: str
    manifest: MixManifest

    def __post_init__(self):
        labels = [self.key_label] + list(self.distractor_labels)
        if not self.distractor_labels or len(set(labels)) != len(labels):
            raise InvalidInput(_("'{mix_id}': key and distractor labels must be distinct")
                               .format(mix_id=self.mix_id))
        if len(self.manifest.sources) < 2:
            raise InvalidInput(_("'{mix_id}': a mix needs at least two sources")
                               .format(mix_id=self.mix_id))
        if sum(1 for _c, label, _g in self.manifest.sources if label == self.key_label) != 1:
            raise InvalidInput(_("'{mix_id}': exactly one source must carry the key label")
                               .format(mix_id=self.mix_id))

    def to_dict(self):
        return {
            'mix_id': self.mix_id,
            'instruction': self.instruction,
            'key_label': self.key_label,
            'distractors': list(self.distractor_labels),
            'manifest': self.manifest.to_dict(),
        }


@dataclasses.dataclass
class LabelEntry:
    clip_id: str
    label: str
    wav_path: str = None


@dataclasses.dataclass
class PcmAudio:
    """Mono audio as float samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatMismatch(_("Only mono audio is supported"))
        if self.sample_rate <= 0:
            raise FormatMismatch(_("Sample rate must be positive"))

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate


def _sentence(caption):
    caption = caption.strip()
    if caption[-1] not in '.!?':
        caption += '.'
    return caption


class FallbackRewriter:
    """Join the five captions verbatim with cycled connectives."""

    def rewrite(self, captions):
        parts = [_sentence(captions[0])]
        for i, caption in enumerate(captions[1:]):
            parts.append('{connective} {sentence}'.format(
                connective=CONNECTIVES[i % len(CONNECTIVES)], sentence=_sentence(caption)))
        return ' '.join(parts)


class ChatRewriter:
    def __init__(self, client):
        self.client = client

    def rewrite(self, captions):
        listing = '\n'.join('{i}. {caption}'.format(i=i + 1, caption=c.strip())
                            for i, c in enumerate(captions))
        return self.client.complete(LONG_CAPTION_PROMPT + '\n\n' + listing)


def oxford_join(labels):
    labels = list(labels)
    if len(labels) == 1:
        return labels[0]
    if len(labels) == 2:
        return '{0} and {1}'.format(*labels)
    return ', '.join(labels[:-1]) + ', and ' + labels[-1]


class FallbackInstructor:
    TEMPLATE = ('Ignore irrelevant information such as {distractors} '
                'and find samples with {key} sounds.')

    def instruct(self, key_label, distractor_labels):
        return self.TEMPLATE.format(distractors=oxford_join(distractor_labels), key=key_label)


class ChatInstructor:
    def __init__(self, client):
        self.client = client

    def instruct(self, key_label, distractor_labels):
        prompt = '{prompt}\n\nKey label: {key}\nUseless labels: {useless}'.format(
            prompt=CONDITIONAL_PROMPT, key=key_label, useless=', '.join(distractor_labels))
        return self.client.complete(prompt)


def corpus_stats(records):
    """Count and mean/min/max word counts of LongCaptionRecords."""
    records = list(records)
    if not records:
        raise InvalidInput(_("No records to summarize"))
    counts = [r.word_count for r in records]
    return {
        'count': len(counts),
        'mean': sum(counts) / len(counts),
        'min': min(counts),
        'max': max(counts),
    }


def build_long_captions(groups, rewriter=None, fallback=True, max_parallel=1):
    """Merge each group's five captions into one paragraph.

    Returns the records in input order and their corpus_stats.
    """
    groups = list(groups)
    if not groups:
        raise InvalidInput(_("No caption groups given"))
    if rewriter is None:
        rewriter = FallbackRewriter()
    rule = FallbackRewriter()

    def _rewrite(group):
        try:
            paragraph = rewriter.rewrite(group.captions).strip()
            if not paragraph:
                raise ProtocolError(_("Rewriter returned an empty paragraph"))
        except BackendException as e:
            if not fallback:
                raise BackendUnavailable(_("Rewriter failed on '{clip_id}'")
                                         .format(clip_id=group.clip_id), str(e)) from e
            logging.warning(_("Rewriter failed on '{clip_id}' ({error}), joining captions")
                            .format(clip_id=group.clip_id, error=e))
            paragraph = rule.rewrite(group.captions)
        return LongCaptionRecord(group.clip_id, paragraph)

    records = common.ordered_map(_rewrite, groups, max_parallel)
    stats = corpus_stats(records)
    logging.info(_("Built {count} long captions, {mean:.1f} words on average")
                 .format(count=stats['count'], mean=stats['mean']))
    return records, stats


def build_conditional_mixes(label_pool, n_records, seed, instructor=None,
                            distractors=DEFAULT_DISTRACTORS, fallback=True, durations=None):
    """Sample key/distractor clip sets and write an instruction for each.

    Clips are grouped by label in seeded order and dealt round-robin to
    the records, at most one clip of a label per record, so every pool
    that admits a solution is filled.  No clip is used by two records.
    A seeded shuffle of each record picks the key clip.
    """
    pool = [(e.clip_id, e.label) if isinstance(e, LabelEntry) else tuple(e)
            for e in label_pool]
    clip_ids = [clip_id for clip_id, _label in pool]
    if len(set(clip_ids)) != len(clip_ids):
        raise InvalidInput(_("Duplicate clip ids in the label pool"))
    if distractors < 1:
        raise InvalidInput(_("A mix needs at least one distractor"))
    per_record = 1 + distractors
    if len(pool) < per_record * n_records:
        raise InsufficientPool(_("{n} records need {need} clips, the pool has {have}")
                               .format(n=n_records, need=per_record * n_records,
                                       have=len(pool)))
    if instructor is None:
        instructor = FallbackInstructor()
    rule = FallbackInstructor()

    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 2])
    by_label = {}
    for i in rng.permutation(len(pool)):
        by_label.setdefault(pool[i][1], []).append(pool[i])
    slots = per_record * n_records
    # a label fills at most one slot per record
    usable = sum(min(len(clips), n_records) for clips in by_label.values())
    if usable < slots:
        raise InsufficientPool(_("{n} records need {need} clips with distinct labels per "
                                 "record, the pool allows {have}")
                               .format(n=n_records, need=slots, have=usable))
    sequence = []
    for clips in by_label.values():
        sequence.extend(clips[:n_records])
    # slot j goes to record j mod n_records; each label block spans at most
    # n_records consecutive slots, so it never repeats within a record
    sequence = sequence[:slots]
    gain = 1.0 / per_record
    records = []
    for n in range(n_records):
        members = sequence[n::n_records]
        chosen = [members[i] for i in rng.permutation(per_record)]

        key_label = chosen[0][1]
        distractor_labels = [label for _clip, label in chosen[1:]]
        try:
            instruction = instructor.instruct(key_label, distractor_labels).strip()
            if not instruction:
                raise ProtocolError(_("Instructor returned an empty instruction"))
        except BackendException as e:
            if not fallback:
                raise BackendUnavailable(_("Instructor failed"), str(e)) from e
            logging.warning(_("Instructor failed ({error}), using the template")
                            .format(error=e))
            instruction = rule.instruct(key_label, distractor_labels)
        duration = None
        if durations:
            duration = max(durations[clip_id] for clip_id, _label in chosen)
        manifest = MixManifest([(clip_id, label, gain) for clip_id, label in chosen], duration)
        records.append(ConditionalRecord('mix-{n:05d}'.format(n=n), key_label,
                                         distractor_labels, instruction, manifest))
    logging.info(_("Built {n} conditional records from {clips} clips")
                 .format(n=len(records), clips=per_record * len(records)))
    return records


def mix_audio(manifest, sources, duration=None):
    """Sum gain-scaled sources and peak-normalize the mix to -1 dBFS.

    sources maps clip ids to PcmAudio.  Shorter sources are zero-padded
    to the mix length: the manifest (or given) duration when set, else
    the longest source.  Summation runs in a canonical source order so
    the result does not depend on how the manifest lists its sources.
    """
    if not manifest.sources:
        raise InvalidInput(_("Cannot mix an empty manifest"))
    missing = sorted(c for c, _label, _gain in manifest.sources if c not in sources)
    if missing:
        raise InvalidInput(_("No audio for {ids}").format(ids=', '.join(missing)))
    rates = {sources[c].sample_rate for c, _label, _gain in manifest.sources}
    if len(rates) != 1:
        raise FormatMismatch(_("Sources have different sample rates: {rates}")
                             .format(rates=sorted(rates)))
    rate = rates.pop()
    if duration is None:
        duration = manifest.duration
    if duration is None:
        length = max(sources[c].samples.shape[0] for c, _label, _gain in manifest.sources)
    else:
        length = int(round(duration * rate))
    if length <= 0:
        raise InvalidInput(_("Mix would be empty"))
    mix = np.zeros(length)
    for clip_id, label, gain in sorted(manifest.sources):
        samples = sources[clip_id].samples[:length]
        mix[:samples.shape[0]] += gain * samples
    peak = np.max(np.abs(mix))
    if peak == 0.0:
        raise InvalidInput(_("The mix is silent"))
    return PcmAudio(mix * (PEAK_TARGET / peak), rate)


def read_wav(path):
    """Read a 16-bit PCM mono WAV file."""
    try:
        with wave.open(str(path), 'rb') as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatMismatch(_("'{path}' is not 16-bit mono PCM").format(path=path))
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatMismatch(_("'{path}' is not a PCM WAV file").format(path=path),
                             str(e)) from e
    samples = np.frombuffer(frames, dtype='<i2').astype(np.float64) / PCM_SCALE
    return PcmAudio(samples, rate)


def wav_bytes(audio):
    pcm = np.round(np.clip(audio.samples, -1.0, 1.0) * PCM_SCALE).astype('<i2')
    buf = io.BytesIO()
    with wave.open(buf, 'wb') as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, audio):
    common.write_atomic(path, wav_bytes(audio))


def _csv_rows(path):
    with open(path, encoding='utf-8', newline='') as fp:
        reader = csv.DictReader(fp)
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def load_caption_groups(path):
    """Read a caption CSV: clip_id (or file_name) plus caption_1 ... caption_5."""
    groups = []
    for lineno, row in _csv_rows(path):
        clip_id = row.get('clip_id') or row.get('file_name')
        captions = [row.get('caption_{i}'.format(i=i + 1)) or '' for i in range(CAPTIONS_PER_CLIP)]
        if not clip_id:
            raise InvalidInput(_("{path}: line {lineno}: no clip_id")
                               .format(path=path, lineno=lineno))
        try:
            groups.append(CaptionGroup(clip_id, captions))
        except InvalidInput as e:
            raise InvalidInput(_("{path}: line {lineno}: {error}")
                               .format(path=path, lineno=lineno, error=e.value)) from e
    return groups


def load_label_manifest(path):
    """Read a label manifest CSV: clip_id, label and an optional wav_path.

    Relative WAV paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for lineno, row in _csv_rows(path):
        clip_id = (row.get('clip_id') or '').strip()
        label = (row.get('label') or '').strip()
        if not clip_id or not label:
            raise InvalidInput(_("{path}: line {lineno}: clip_id and label are required")
                               .format(path=path, lineno=lineno))
        wav_path = (row.get('wav_path') or '').strip() or None
        if wav_path and not os.path.isabs(wav_path):
            wav_path = os.path.join(base, wav_path)
        entries.append(LabelEntry(clip_id, label, wav_path))
    return entries


def records_jsonl(records):
    return ''.join(common.dumps_json(r.to_dict(), pretty=False) + '\n' for r in records)
