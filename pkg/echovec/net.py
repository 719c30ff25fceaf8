#!/usr/bin/env python3
#
# net.py - part of the echovec embedding tools
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

import logging
import threading

import requests
from requests.adapters import HTTPAdapter, Retry

from . import _
from .exception import BackendTimeout, BackendUnavailable, ProtocolError

HEADERS = {'User-Agent': 'echovec'}


def make_session(retries=3, backoff_factor=0.1):
    """Build a session that retries connection failures, never POST bodies.

    Retry applies to failed DNS lookups, socket connections and
    connection timeouts, so a request that reached the server is not
    sent twice.
    """
    session = requests.Session()
    if retries:
        max_retries = Retry(total=retries, connect=retries, read=0, status=0,
                            backoff_factor=backoff_factor)
        adapter = HTTPAdapter(max_retries=max_retries)
        session.mount('http://', adapter)
        session.mount('https://', adapter)
    session.headers.update(HEADERS)
    return session


def post_json(session, url, payload, timeout=60):
    """POST a JSON payload and return the decoded JSON response.

    Transport problems are turned into the backend exceptions so callers
    only have to deal with one family of errors.
    """
    try:
        r = session.post(url, json=payload, timeout=timeout)
        r.raise_for_status()
    except requests.exceptions.Timeout as e:
        raise BackendTimeout(_("Request to {url} timed out after {timeout}s")
                             .format(url=url, timeout=timeout)) from e
    except requests.exceptions.RequestException as e:
        raise BackendUnavailable(_("Request to {url} failed").format(url=url), str(e)) from e
    try:
        return r.json()
    except ValueError as e:
        raise ProtocolError(_("{url} did not answer with JSON").format(url=url),
                            r.text[:2000]) from e


class ChatClient:
    """Minimal client for an OpenAI-compatible chat completion endpoint.

    Used by the LLM-backed summarizer, scorer, rewriter and instructor;
    every one of them has a deterministic fallback when no endpoint is
    configured.
    """

    def __init__(self, endpoint, model='default', timeout=120, retries=3):
        self.url = endpoint.rstrip('/') + '/v1/chat/completions'
        self.model = model
        self.timeout = timeout
        self._local = threading.local()
        self._retries = retries

    @property
    def session(self):
        # requests sessions are not thread-safe, keep one per thread
        if not hasattr(self._local, 'session'):
            self._local.session = make_session(self._retries)
        return self._local.session

    def complete(self, prompt):
        payload = {
            'model': self.model,
            'messages': [{'role': 'user', 'content': prompt}],
            'temperature': 0,
        }
        logging.debug('POST %s (%d prompt chars)', self.url, len(prompt))
        data = post_json(self.session, self.url, payload, self.timeout)
        try:
            content = data['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(_("Malformed chat completion from {url}")
                                .format(url=self.url), str(data)[:2000]) from e
        if not isinstance(content, str):
            raise ProtocolError(_("Chat completion content is not a string"))
        return content.strip()
