import gettext
import glob
import os
import sys


# support running straight from git and standard installs
rootpaths = [
    os.path.realpath(os.path.join(os.path.dirname(__file__), '..')),
    os.path.realpath(
        os.path.join(os.path.dirname(__file__), '..', '..', '..', '..', 'share')
    ),
    os.path.join(sys.prefix, 'share'),
]

localedir = None
for rootpath in rootpaths:
    if len(glob.glob(os.path.join(rootpath, 'locale', '*', 'LC_MESSAGES', 'echovec.mo'))) > 0:
        localedir = os.path.join(rootpath, 'locale')
        break

gettext.bindtextdomain('echovec', localedir)
gettext.textdomain('echovec')
_ = gettext.gettext


from echovec.exception import (EchoVecException,
                               ConfigurationException,
                               BackendException,
                               DataException)  # NOQA: E402
EchoVecException  # NOQA: B101
ConfigurationException  # NOQA: B101
BackendException  # NOQA: B101
DataException  # NOQA: B101

from echovec.vectors import (Modality,
                             EmbeddingVector,
                             last_token_pool,
                             l2_normalize,
                             cosine,
                             centroid)  # NOQA: E402
Modality  # NOQA: B101
EmbeddingVector  # NOQA: B101
last_token_pool  # NOQA: B101
l2_normalize  # NOQA: B101
cosine  # NOQA: B101
centroid  # NOQA: B101
from echovec.store import EmbeddingStore  # NOQA: E402
EmbeddingStore  # NOQA: B101
from echovec.prompt import (PromptVariant,
                            render_prompt)  # NOQA: E402
PromptVariant  # NOQA: B101
render_prompt  # NOQA: B101
