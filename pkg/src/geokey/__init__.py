"""Geocoded, time-boxed symmetric keys for underwater authorization.

A master key held under threshold custody derives one 256-bit key per
(geocell, 60-day epoch).  Devices carry bundles of cell keys for their
licensed area and window; presence plus possession is proven over an
acoustic channel with a 6-byte challenge and 5-byte MAC response.

Modules: geocell (grid and coverage), cipher (RC5-32, CBC, CBC-MAC),
custody (ceremony and secret sharing), kdf (key derivation), keystore
(device bundles), authority (issuance service), authzsim (protocol and
channel simulator), keyspace (vectorized bulk derivation), cli.
"""

from .cipher import Rc5Params, RoundKeys
from .custody import Contribution, MasterKey, Share
from .geocell import CellBounds, GeoPoint, Geocode
from .kdf import GeoKey, KeyDeriver, TimeInterval, epochs_for
from .keystore import KeyRecord, Keystore

__version__ = "0.1.0"

__all__ = [
    "CellBounds", "Contribution", "GeoKey", "GeoPoint", "Geocode",
    "KeyDeriver", "KeyRecord", "Keystore", "MasterKey", "Rc5Params",
    "RoundKeys", "Share", "TimeInterval", "epochs_for", "__version__",
]
