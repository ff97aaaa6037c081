#pragma once

#include <cstdint>
#include <string>

namespace wm {

// Deterministic English-like filler text: Zipf-weighted common words arranged
// into sentences and paragraphs. Statistically learnable by a byte-level LM
// and reproducible from the seed; used to build training corpora where no
// large text collection ships with the machine.
std::string synth_text(uint64_t n_bytes, uint64_t seed);

}  // namespace wm
