// SPDX-License-Identifier: Apache-2.0
#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sg {
namespace {

using nlohmann::json;

std::string lower(std::string s) {
    for (char &c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
}

bool is_strippable(char c) {
    return c == '.' || c == '?' || c == '!' || c == ',' || c == ';' || c == ':' || c == '"';
}

// Lowercase, strip surrounding punctuation; empty result means "drop".
std::string normalize_word(const std::string &raw) {
    size_t b = 0, e = raw.size();
    while (b < e && is_strippable(raw[b])) ++b;
    while (e > b && is_strippable(raw[e - 1])) --e;
    return lower(raw.substr(b, e - b));
}

std::vector<std::string> split_words(const std::string &text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
        std::string w = normalize_word(tok);
        if (!w.empty()) {
            out.push_back(std::move(w));
        }
    }
    return out;
}

[[noreturn]] void parse_fail(size_t line_no, const std::string &what) {
    throw ParseError("parse error at line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

// --- DualVocab ---------------------------------------------------------------

DualVocab DualVocab::build(std::span<const Utterance> utterances, int min_count) {
    if (min_count < 1) {
        throw std::invalid_argument("build_vocab: min_count must be >= 1");
    }
    if (utterances.empty()) {
        throw std::invalid_argument("build_vocab: empty corpus");
    }

    std::map<std::string, WordFreq> freq = count_word_freq(utterances);

    DualVocab v;
    int next = 0;
    v.specials_[kPad] = next++;
    v.specials_[kUnkEnv] = next++;
    v.specials_[kUnkLan] = next++;

    std::map<std::string, int> roles;  // sorted role names
    for (const Utterance &u : utterances) {
        roles.emplace(u.role, 0);
    }
    for (auto &[name, id] : roles) {
        id = next++;
        v.specials_[name] = id;
    }

    struct Cand {
        std::string word;
        long total;
    };
    std::vector<Cand> kept;
    for (const auto &[word, f] : freq) {
        if (f.env >= min_count || f.lan >= min_count) {
            kept.push_back({word, f.env + f.lan});
        }
    }
    std::sort(kept.begin(), kept.end(), [](const Cand &a, const Cand &b) {
        if (a.total != b.total) return a.total > b.total;
        return a.word < b.word;
    });
    for (const Cand &c : kept) {
        Entry e;
        e.env_id = next++;
        e.lan_id = next++;
        v.entries_[c.word] = e;
    }
    v.size_ = next;
    v.index_names();
    return v;
}

void DualVocab::index_names() {
    names_.assign(static_cast<size_t>(size_), "");
    for (const auto &[name, id] : specials_) {
        names_[static_cast<size_t>(id)] = name;
    }
    for (const auto &[word, e] : entries_) {
        names_[static_cast<size_t>(e.env_id)] = word + ":ENV";
        names_[static_cast<size_t>(e.lan_id)] = word + ":LAN";
    }
}

const DualVocab::Entry &DualVocab::entry(const std::string &w) const {
    auto it = entries_.find(w);
    if (it == entries_.end()) {
        throw std::out_of_range("vocab: unknown word '" + w + "'");
    }
    return it->second;
}

int DualVocab::special(const std::string &name) const {
    auto it = specials_.find(name);
    if (it == specials_.end()) {
        throw std::out_of_range("vocab: unknown special token '" + name + "'");
    }
    return it->second;
}

int DualVocab::token(const std::string &word, Form f) const {
    auto it = entries_.find(word);
    if (it == entries_.end()) {
        return f == Form::kEnv ? special(kUnkEnv) : special(kUnkLan);
    }
    return f == Form::kEnv ? it->second.env_id : it->second.lan_id;
}

const std::string &DualVocab::token_name(int id) const {
    if (id < 0 || id >= size_) {
        throw std::out_of_range("vocab: token id " + std::to_string(id) + " out of range");
    }
    return names_[static_cast<size_t>(id)];
}

void DualVocab::save(const std::string &path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for write: " + path);
    }
    for (const auto &[name, id] : specials_) {
        os << "#special\t" << name << "\t" << id << "\n";
    }
    for (const auto &[word, e] : entries_) {
        os << word << "\t" << e.env_id << "\t" << e.lan_id << "\n";
    }
}

DualVocab DualVocab::load(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open: " + path);
    }
    DualVocab v;
    std::string line;
    int max_id = -1;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string a, b, c;
        if (!std::getline(ls, a, '\t') || !std::getline(ls, b, '\t') || !std::getline(ls, c)) {
            parse_fail(line_no, "malformed vocabulary line");
        }
        if (a == "#special") {
            int id = std::stoi(c);
            v.specials_[b] = id;
            max_id = std::max(max_id, id);
        } else {
            Entry e;
            e.env_id = std::stoi(b);
            e.lan_id = std::stoi(c);
            v.entries_[a] = e;
            max_id = std::max(max_id, std::max(e.env_id, e.lan_id));
        }
    }
    v.size_ = max_id + 1;
    v.index_names();
    return v;
}

// --- CHAT parsing --------------------------------------------------------------

std::vector<Utterance> parse_chat(const std::string &text) {
    std::vector<Utterance> out;
    std::istringstream is(text);
    std::string line;
    size_t line_no = 0;
    std::string current_role = "<NAR>";
    bool seen_speaker = false;

    auto emit = [&out](std::string role, std::vector<std::string> words, Form form) {
        if (!words.empty()) {
            out.push_back(Utterance{std::move(role), std::move(words), form});
        }
    };

    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        // strip leading whitespace to classify the line
        size_t b = line.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const std::string body = line.substr(b);

        if (body[0] == '@') continue;  // CHAT headers

        if (body[0] == '*') {
            size_t colon = body.find(':');
            if (colon == std::string::npos || colon == 1) {
                parse_fail(line_no, "speaker line without speaker code");
            }
            std::string code = body.substr(1, colon - 1);
            for (char c : code) {
                if (std::isspace(static_cast<unsigned char>(c))) {
                    parse_fail(line_no, "speaker line without speaker code");
                }
            }
            current_role = "<" + code + ">";
            seen_speaker = true;

            // Split speech from inline [% ...] local events, order preserved:
            // the spoken words form one LAN utterance, each event one ENV
            // utterance after it.
            std::string rest = body.substr(colon + 1);
            std::string speech;
            std::vector<std::string> events;
            size_t pos = 0;
            while (pos < rest.size()) {
                size_t open = rest.find('[', pos);
                if (open == std::string::npos) {
                    speech += rest.substr(pos);
                    break;
                }
                speech += rest.substr(pos, open - pos);
                size_t close = rest.find(']', open);
                if (close == std::string::npos) {
                    parse_fail(line_no, "unterminated bracket");
                }
                std::string inner = rest.substr(open + 1, close - open - 1);
                // local events are marked "[% ...]"; other bracket codes are dropped
                size_t ib = inner.find_first_not_of(" \t");
                if (ib != std::string::npos && inner[ib] == '%') {
                    events.push_back(inner.substr(ib + 1));
                }
                pos = close + 1;
            }

            std::vector<std::string> words = split_words(speech);
            // "0" marks speechless action lines
            std::erase(words, "0");
            emit(current_role, std::move(words), Form::kLan);
            for (const std::string &ev : events) {
                emit(current_role, split_words(ev), Form::kEnv);
            }
            continue;
        }

        if (body[0] == '%') {
            size_t colon = body.find(':');
            if (colon == std::string::npos) {
                parse_fail(line_no, "tier line without tier code");
            }
            std::string tier = body.substr(1, colon - 1);
            if (tier != "act" && tier != "sit") {
                continue;  // tiers outside the subset carry no ENV content here
            }
            // file-initial tiers attach to the narrator role
            std::string role = seen_speaker ? current_role : "<NAR>";
            emit(std::move(role), split_words(body.substr(colon + 1)), Form::kEnv);
            continue;
        }

        parse_fail(line_no, "unrecognized line '" + body.substr(0, 32) + "'");
    }
    return out;
}

// --- caption dialogue -------------------------------------------------------

std::vector<Utterance> parse_caption_dialogue(const std::string &text) {
    std::vector<Utterance> out;
    std::istringstream is(text);
    std::string line;
    size_t record_no = 0;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        ++record_no;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception &e) {
            throw ParseError("parse error at record " + std::to_string(record_no) + ": " +
                             e.what());
        }
        if (!rec.contains("caption") || !rec["caption"].is_string()) {
            throw ParseError("parse error at record " + std::to_string(record_no) +
                             ": missing caption");
        }
        std::vector<std::string> cap = split_words(rec["caption"].get<std::string>());
        if (cap.empty()) {
            throw ParseError("parse error at record " + std::to_string(record_no) +
                             ": missing caption");
        }
        out.push_back(Utterance{"<CAP>", std::move(cap), Form::kEnv});

        const json turns = rec.value("turns", json::array());
        std::string expect = "Q";
        size_t turn_idx = 0;
        for (const json &t : turns) {
            const std::string role = t.value("role", "");
            if (role != expect) {
                throw ParseError("parse error at record " + std::to_string(record_no) +
                                 ": non-alternating turns at turn " + std::to_string(turn_idx));
            }
            out.push_back(
                Utterance{"<" + role + ">", split_words(t.value("text", "")), Form::kLan});
            expect = expect == "Q" ? "A" : "Q";
            ++turn_idx;
        }
    }
    return out;
}

// --- tokenization & chunking ---------------------------------------------------

std::vector<CorpusChunk> tokenize_corpus(std::span<const Utterance> utterances,
                                         const DualVocab &vocab, int chunk_len) {
    if (chunk_len < 2) {
        throw std::invalid_argument("tokenize_corpus: chunk_len must be >= 2");
    }
    std::vector<int> stream;
    for (const Utterance &u : utterances) {
        stream.push_back(vocab.special(u.role));
        for (const std::string &w : u.words) {
            stream.push_back(vocab.token(w, u.form));
        }
    }
    std::vector<CorpusChunk> chunks;
    const int pad = vocab.pad_id();
    for (size_t off = 0; off < stream.size(); off += static_cast<size_t>(chunk_len)) {
        CorpusChunk c;
        c.tokens.assign(static_cast<size_t>(chunk_len), pad);
        const size_t n = std::min(stream.size() - off, static_cast<size_t>(chunk_len));
        std::copy(stream.begin() + static_cast<long>(off),
                  stream.begin() + static_cast<long>(off + n), c.tokens.begin());
        chunks.push_back(std::move(c));
    }
    return chunks;
}

std::map<std::string, long> count_cooccurrence(std::span<const CorpusChunk> chunks,
                                               const DualVocab &vocab,
                                               std::span<const std::string> words) {
    std::map<std::string, long> counts;
    std::vector<std::pair<int, int>> id_pairs;
    id_pairs.reserve(words.size());
    for (const std::string &w : words) {
        if (!vocab.has_word(w)) {
            throw std::invalid_argument("count_cooccurrence: word '" + w + "' not in vocabulary");
        }
        const auto &e = vocab.entry(w);
        id_pairs.emplace_back(e.env_id, e.lan_id);
        counts[w] = 0;
    }

    std::vector<uint8_t> present(static_cast<size_t>(vocab.size()), 0);
    for (const CorpusChunk &c : chunks) {
        for (int t : c.tokens) {
            present[static_cast<size_t>(t)] = 1;
        }
        size_t wi = 0;
        for (const std::string &w : words) {
            const auto &[env_id, lan_id] = id_pairs[wi++];
            if (present[static_cast<size_t>(env_id)] && present[static_cast<size_t>(lan_id)]) {
                ++counts[w];
            }
        }
        for (int t : c.tokens) {
            present[static_cast<size_t>(t)] = 0;
        }
    }
    return counts;
}

// --- templates ------------------------------------------------------------------

namespace {

int token_from_name(const std::string &name, const DualVocab &vocab) {
    if (!name.empty() && name.front() == '<') {
        return vocab.special(name);
    }
    size_t sep = name.rfind(':');
    if (sep == std::string::npos) {
        throw std::invalid_argument("template token '" + name + "' lacks a form tag");
    }
    const std::string word = name.substr(0, sep);
    const std::string form = name.substr(sep + 1);
    if (form == "ENV") return vocab.token(word, Form::kEnv);
    if (form == "LAN") return vocab.token(word, Form::kLan);
    throw std::invalid_argument("template token '" + name + "' has unknown form tag");
}

}  // namespace

std::vector<int> instantiate(const ContextTemplate &tmpl, const std::string &filler_word,
                             const DualVocab &vocab) {
    if (!vocab.has_word(filler_word)) {
        throw std::invalid_argument("instantiate: filler '" + filler_word +
                                    "' has no ENV form in vocabulary");
    }
    std::vector<int> seq;
    seq.reserve(static_cast<size_t>(tmpl.length()));
    for (const std::string &t : tmpl.prefix_words) {
        seq.push_back(token_from_name(t, vocab));
    }
    seq.push_back(vocab.entry(filler_word).env_id);
    for (const std::string &t : tmpl.suffix_words) {
        seq.push_back(token_from_name(t, vocab));
    }
    return seq;
}

std::vector<ContextTemplate> load_templates(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open: " + path);
    }
    std::vector<ContextTemplate> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception &e) {
            parse_fail(line_no, e.what());
        }
        ContextTemplate t;
        t.target = j.at("target").get<std::string>();
        t.template_id = j.at("template_id").get<int>();
        t.prefix_words = j.at("prefix_words").get<std::vector<std::string>>();
        t.suffix_words = j.at("suffix_words").get<std::vector<std::string>>();
        if (t.suffix_words.empty()) {
            parse_fail(line_no, "template suffix is empty");
        }
        for (const auto &w : t.prefix_words) {
            if (w.find("[FILLER]") != std::string::npos) {
                parse_fail(line_no, "template has a stray FILLER marker");
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

void save_templates(const std::string &path, std::span<const ContextTemplate> templates) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for write: " + path);
    }
    for (const ContextTemplate &t : templates) {
        json j;
        j["target"] = t.target;
        j["template_id"] = t.template_id;
        j["prefix_words"] = t.prefix_words;
        j["suffix_words"] = t.suffix_words;
        os << j.dump() << "\n";
    }
}

// --- word frequency & selection ----------------------------------------------

std::map<std::string, WordFreq> count_word_freq(std::span<const Utterance> utterances) {
    std::map<std::string, WordFreq> freq;
    for (const Utterance &u : utterances) {
        for (const std::string &w : u.words) {
            WordFreq &f = freq[w];
            if (u.form == Form::kEnv) {
                ++f.env;
            } else {
                ++f.lan;
            }
        }
    }
    return freq;
}

std::vector<std::string> select_target_words(const std::map<std::string, WordFreq> &freq,
                                             std::span<const std::string> inventory,
                                             long min_freq, int top_k) {
    struct Cand {
        std::string word;
        long env;
    };
    std::vector<Cand> cands;
    for (const std::string &w : inventory) {
        auto it = freq.find(w);
        if (it == freq.end()) continue;
        if (it->second.env >= min_freq && it->second.lan >= min_freq) {
            cands.push_back({w, it->second.env});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand &a, const Cand &b) {
        if (a.env != b.env) return a.env > b.env;
        return a.word < b.word;
    });
    if (static_cast<int>(cands.size()) > top_k) {
        cands.resize(static_cast<size_t>(top_k));
    }
    std::vector<std::string> out;
    out.reserve(cands.size());
    for (Cand &c : cands) {
        out.push_back(std::move(c.word));
    }
    return out;
}

// --- chunk file ------------------------------------------------------------------

namespace {

void put_u32(std::ostream &os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char *>(b), 4);
}

uint32_t get_u32(std::istream &is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char *>(b), 4);
    if (!is) {
        throw std::runtime_error("chunk file truncated");
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

constexpr uint32_t kChunkMagic = 0x31434753u;  // "SGC1"

}  // namespace

void save_chunks(const std::string &path, std::span<const CorpusChunk> chunks, int chunk_len) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for write: " + path);
    }
    put_u32(os, kChunkMagic);
    put_u32(os, static_cast<uint32_t>(chunk_len));
    put_u32(os, static_cast<uint32_t>(chunks.size()));
    for (const CorpusChunk &c : chunks) {
        for (int t : c.tokens) {
            put_u32(os, static_cast<uint32_t>(t));
        }
    }
}

std::vector<CorpusChunk> load_chunks(const std::string &path, int *chunk_len_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open: " + path);
    }
    if (get_u32(is) != kChunkMagic) {
        throw std::runtime_error("not a chunk file: " + path);
    }
    const uint32_t chunk_len = get_u32(is);
    const uint32_t count = get_u32(is);
    if (chunk_len_out) {
        *chunk_len_out = static_cast<int>(chunk_len);
    }
    std::vector<CorpusChunk> chunks(count);
    for (uint32_t i = 0; i < count; ++i) {
        chunks[i].tokens.resize(chunk_len);
        for (uint32_t j = 0; j < chunk_len; ++j) {
            chunks[i].tokens[j] = static_cast<int>(get_u32(is));
        }
    }
    return chunks;
}

}  // namespace sg
