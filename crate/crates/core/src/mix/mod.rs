//! Dataset construction: pools, pairing, SNR mixing, manifests.
