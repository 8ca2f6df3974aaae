// SPDX-License-Identifier: Apache-2.0
#include "gen.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "rng.hpp"

namespace sg {
namespace {

// {} is the noun slot. Event frames describe the scene; speech frames are
// the child's or caregiver's utterances.
const char *kEventFrames[] = {
    "asked for a new {}",
    "points at the {}",
    "puts the {} on the table",
    "picks up the {}",
    "takes the {} from the box",
    "plays with the {}",
    "looks at the {}",
    "gives the {} to granny",
    "finds a {} under the chair",
    "reaches for the {}",
    "holds a little {}",
    "drops the {} on the floor",
    "brings the {} to daddy",
    "hides the {} behind the sofa",
    "shows the {} to mother",
    "carries the {} around the room",
};

const char *kSpeechFrames[] = {
    "i love this {}",
    "give me the {}",
    "i want the {}",
    "that is a nice {}",
    "where is the {}",
    "do you like the {}",
    "i see a {}",
    "can i have the {}",
    "here is the {}",
    "mommy look a {}",
    "what a big {}",
    "is that a {}",
    "the {} is so pretty",
    "this {} is mine",
    "look at the {}",
    "show me the {}",
};

const char *kChiChatter[] = {
    "yes", "no",     "what is that", "why",   "look",       "more please",
    "again", "okay", "i do not know", "uh oh", "all done",   "me too",
};

const char *kMotChatter[] = {
    "very good",     "what do you see", "be careful",  "come here",
    "well done",     "do you want more", "good job",    "let me see",
    "are you ready", "one moment",       "that is right",
};

const char *kCaptionFrames[] = {
    "a photo of a {} on the table",
    "a small {} in a bright room",
    "a child holding a {}",
    "a {} sitting on the floor",
    "someone looking at a {}",
};

const char *kQuestionFrames[] = {
    "what is it", "what do you call this", "can you name this object",
    "what do we have here", "what is this called",
};

std::string fill(const std::string &frame, const std::string &noun) {
    const size_t pos = frame.find("{}");
    return frame.substr(0, pos) + noun + frame.substr(pos + 2);
}

long count_words(const std::string &s) {
    long n = 0;
    bool in_word = false;
    for (char c : s) {
        if (c == ' ') {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++n;
        }
    }
    return n;
}

class ZipfSampler {
public:
    ZipfSampler(size_t n, double alpha) {
        cum_.reserve(n);
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            total += 1.0 / std::pow(static_cast<double>(i + 1), alpha);
            cum_.push_back(total);
        }
    }
    size_t sample(Rng &rng) const {
        const double u = rng.uniform() * cum_.back();
        size_t lo = 0, hi = cum_.size() - 1;
        while (lo < hi) {
            const size_t mid = (lo + hi) / 2;
            if (cum_[mid] < u) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        return lo;
    }

private:
    std::vector<double> cum_;
};

template <size_t N>
const char *pick(Rng &rng, const char *(&arr)[N]) {
    return arr[rng.below(N)];
}

}  // namespace

GenSummary generate_corpus(const GenOptions &opt) {
    if (opt.nouns.empty()) {
        throw std::invalid_argument("generate_corpus: empty noun inventory");
    }
    if (opt.files < 1 || opt.target_tokens < 100) {
        throw std::invalid_argument("generate_corpus: implausible size options");
    }
    namespace fs = std::filesystem;
    const fs::path root(opt.out_dir);
    fs::create_directories(root / "transcripts");

    Rng rng(opt.seed);
    ZipfSampler zipf(opt.nouns.size(), opt.zipf_alpha);

    GenSummary summary;
    const long tokens_per_file = opt.target_tokens / opt.files;

    for (int f = 0; f < opt.files; ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "session%03d.cha", f);
        std::ofstream os(root / "transcripts" / name, std::ios::binary);
        if (!os) {
            throw std::runtime_error("cannot open for write: " + (root / "transcripts" / name).string());
        }
        os << "@Begin\n@Participants:\tCHI child, MOT mother\n";

        long file_tokens = 0;
        while (file_tokens < tokens_per_file) {
            const std::string noun = opt.nouns[zipf.sample(rng)];
            const bool chi_acts = rng.below(2) == 0;
            const char *actor = chi_acts ? "CHI" : "MOT";
            const char *speaker = rng.uniform() < 0.7 ? "CHI" : "MOT";

            auto emit_tokens = [&](const std::string &text) {
                file_tokens += count_words(text) + 1;  // + role marker
            };

            if (rng.uniform() < opt.noise_prob) {
                const bool chi = rng.below(2) == 0;
                const std::string line = chi ? pick(rng, kChiChatter) : pick(rng, kMotChatter);
                os << "*" << (chi ? "CHI" : "MOT") << ":\t" << line << " .\n";
                emit_tokens(line);
            }
            if (rng.uniform() < opt.distractor_prob) {
                std::string other = opt.nouns[zipf.sample(rng)];
                const std::string ev = fill(pick(rng, kEventFrames), other);
                os << "*" << actor << ":\t0 [% " << ev << "]\n";
                emit_tokens(ev);
            }

            // the grounding event, in one of the CHAT shapes the parser covers
            const std::string event = fill(pick(rng, kEventFrames), noun);
            const double shape = rng.uniform();
            if (shape < 0.5) {
                os << "*" << actor << ":\t0 [% " << event << "]\n";
                emit_tokens(event);
            } else if (shape < 0.85) {
                const bool chi = rng.below(2) == 0;
                const std::string lead = chi ? pick(rng, kChiChatter) : pick(rng, kMotChatter);
                os << "*" << (chi ? "CHI" : "MOT") << ":\t" << lead << " .\n";
                os << (rng.below(2) == 0 ? "%act:\t" : "%sit:\t") << event << "\n";
                emit_tokens(lead);
                emit_tokens(event);
            } else {
                const std::string lead = pick(rng, kChiChatter);
                os << "*" << actor << ":\t" << lead << " [% " << event << "] .\n";
                emit_tokens(lead);
                emit_tokens(event);
            }

            if (rng.uniform() < opt.lan_follow_prob) {
                const std::string speech = fill(pick(rng, kSpeechFrames), noun);
                os << "*" << speaker << ":\t" << speech << " .\n";
                emit_tokens(speech);
            } else {
                const bool chi = rng.below(2) == 0;
                const std::string line = chi ? pick(rng, kChiChatter) : pick(rng, kMotChatter);
                os << "*" << (chi ? "CHI" : "MOT") << ":\t" << line << " .\n";
                emit_tokens(line);
            }
            ++summary.scenes;
        }
        os << "@End\n";
        summary.tokens += file_tokens;
        ++summary.files;
    }

    // companion caption-dialogue file exercising the second input format
    {
        std::ofstream os(root / "captions.jsonl", std::ios::binary);
        if (!os) {
            throw std::runtime_error("cannot open for write: " + (root / "captions.jsonl").string());
        }
        for (int r = 0; r < opt.caption_records; ++r) {
            const std::string noun = opt.nouns[zipf.sample(rng)];
            nlohmann::json rec;
            rec["caption"] = fill(pick(rng, kCaptionFrames), noun);
            nlohmann::json turns = nlohmann::json::array();
            turns.push_back({{"role", "Q"}, {"text", pick(rng, kQuestionFrames)}});
            turns.push_back({{"role", "A"}, {"text", "a " + noun}});
            rec["turns"] = turns;
            os << rec.dump() << "\n";
        }
    }
    return summary;
}

}  // namespace sg
