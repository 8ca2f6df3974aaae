// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sg {

// Synthetic child-directed corpus: scenes pair an environmental event
// mentioning a noun with a following utterance using the same noun, plus
// noun-free chatter. Noun frequencies follow a Zipf law so co-occurrence
// counts spread over orders of magnitude. Output is CHAT-subset transcript
// files plus a small caption-dialogue file, both consumed by the ordinary
// corpus build.
struct GenOptions {
    std::string out_dir;
    std::vector<std::string> nouns;
    long target_tokens = 2200000;
    int files = 40;
    uint64_t seed = 7;
    double zipf_alpha = 1.05;
    double lan_follow_prob = 0.85;  // P(scene's utterance names the noun)
    double noise_prob = 0.3;        // P(extra noun-free chatter per scene)
    double distractor_prob = 0.15;  // P(an earlier event names another noun)
    int caption_records = 200;
};

struct GenSummary {
    long tokens = 0;
    long scenes = 0;
    int files = 0;
};

GenSummary generate_corpus(const GenOptions &opt);

}  // namespace sg
