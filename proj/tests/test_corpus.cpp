// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "corpus.hpp"
#include "rng.hpp"

using namespace sg;

namespace {

std::vector<Utterance> tiny_corpus() {
    return {
        {"<CHI>", {"takes", "book", "from", "mother"}, Form::kEnv},
        {"<CHI>", {"i", "love", "this", "book"}, Form::kLan},
        {"<MOT>", {"gives", "toy", "to", "child"}, Form::kEnv},
        {"<MOT>", {"here", "is", "the", "toy"}, Form::kLan},
        {"<CHI>", {"holds", "ball"}, Form::kEnv},
    };
}

std::filesystem::path temp_file(const std::string &name) {
    auto p = std::filesystem::temp_directory_path() / ("sg_test_" + name);
    std::filesystem::remove(p);
    return p;
}

}  // namespace

TEST_CASE("parse_chat: plain speaker line") {
    auto utts = parse_chat("*CHI:\tI love this book .\n");
    REQUIRE(utts.size() == 1);
    CHECK(utts[0].role == "<CHI>");
    CHECK(utts[0].form == Form::kLan);
    CHECK(utts[0].words == std::vector<std::string>{"i", "love", "this", "book"});
}

TEST_CASE("parse_chat: speechless action becomes a single ENV utterance") {
    auto utts = parse_chat("*CHI:\t0 [% kicks the ball]\n");
    REQUIRE(utts.size() == 1);
    CHECK(utts[0].role == "<CHI>");
    CHECK(utts[0].form == Form::kEnv);
    CHECK(utts[0].words == std::vector<std::string>{"kicks", "the", "ball"});
}

TEST_CASE("parse_chat: situation tier attaches to the preceding speaker") {
    auto utts = parse_chat("*MOT:\tlook at that .\n%sit:\tdog is barking\n");
    REQUIRE(utts.size() == 2);
    CHECK(utts[1].role == "<MOT>");
    CHECK(utts[1].form == Form::kEnv);
    CHECK(utts[1].words == std::vector<std::string>{"dog", "is", "barking"});
}

TEST_CASE("parse_chat: file-initial tier attaches to the narrator role") {
    auto utts = parse_chat("%act:\truns to toy box\n*CHI:\thi .\n");
    REQUIRE(utts.size() == 2);
    CHECK(utts[0].role == "<NAR>");
    CHECK(utts[0].form == Form::kEnv);
}

TEST_CASE("parse_chat: inline event splits speech and environment in order") {
    auto utts = parse_chat("*CHI:\tlook [% points at dog] a dog !\n");
    REQUIRE(utts.size() == 2);
    CHECK(utts[0].form == Form::kLan);
    CHECK(utts[0].words == std::vector<std::string>{"look", "a", "dog"});
    CHECK(utts[1].form == Form::kEnv);
    CHECK(utts[1].words == std::vector<std::string>{"points", "at", "dog"});
}

TEST_CASE("parse_chat: headers and unknown tiers are skipped") {
    auto utts = parse_chat("@Begin\n@Participants: CHI child\n*CHI:\tball .\n%mor:\tn|ball .\n");
    REQUIRE(utts.size() == 1);
    CHECK(utts[0].words == std::vector<std::string>{"ball"});
}

TEST_CASE("parse_chat: malformed lines raise errors with line numbers") {
    CHECK_THROWS_WITH_AS(parse_chat("*CHI:\tok .\n*:\tbroken\n"), doctest::Contains("line 2"),
                         ParseError);
    CHECK_THROWS_WITH_AS(parse_chat("*CHI:\t0 [% unterminated\n"), doctest::Contains("line 1"),
                         ParseError);
    CHECK_THROWS_WITH_AS(parse_chat("a bare line\n"), doctest::Contains("line 1"), ParseError);
}

TEST_CASE("parse_caption_dialogue: caption plus turns") {
    const std::string rec =
        R"({"caption": "a dog reading a book", "turns": [{"role": "Q", "text": "what book"}, )"
        R"({"role": "A", "text": "marriage of true minds"}]})"
        "\n";
    auto utts = parse_caption_dialogue(rec);
    REQUIRE(utts.size() == 3);
    CHECK(utts[0].form == Form::kEnv);
    CHECK(utts[0].role == "<CAP>");
    CHECK(utts[1].form == Form::kLan);
    CHECK(utts[1].role == "<Q>");
    CHECK(utts[2].form == Form::kLan);
    CHECK(utts[2].role == "<A>");
}

TEST_CASE("parse_caption_dialogue: empty turn list gives one ENV utterance") {
    auto utts = parse_caption_dialogue(R"({"caption": "a red ball", "turns": []})" "\n");
    REQUIRE(utts.size() == 1);
    CHECK(utts[0].form == Form::kEnv);
}

TEST_CASE("parse_caption_dialogue: records concatenate in order") {
    const std::string two =
        R"({"caption": "first scene", "turns": []})" "\n"
        R"({"caption": "second scene", "turns": []})" "\n";
    auto utts = parse_caption_dialogue(two);
    REQUIRE(utts.size() == 2);
    CHECK(utts[0].words[0] == "first");
    CHECK(utts[1].words[0] == "second");
}

TEST_CASE("parse_caption_dialogue: bad records name the record index") {
    CHECK_THROWS_WITH_AS(parse_caption_dialogue(R"({"turns": []})" "\n"),
                         doctest::Contains("record 1"), ParseError);
    const std::string bad =
        R"({"caption": "ok", "turns": []})" "\n"
        R"({"caption": "x", "turns": [{"role": "A", "text": "answer first"}]})" "\n";
    CHECK_THROWS_WITH_AS(parse_caption_dialogue(bad), doctest::Contains("record 2"), ParseError);
}

TEST_CASE("build_vocab: every word gets two distinct ids, unique and contiguous") {
    auto utts = tiny_corpus();
    DualVocab v = DualVocab::build(utts, 1);
    std::set<int> seen;
    for (const auto &[name, id] : v.specials()) seen.insert(id);
    for (const auto &[word, e] : v.entries()) {
        CHECK(e.env_id != e.lan_id);
        seen.insert(e.env_id);
        seen.insert(e.lan_id);
    }
    CHECK(static_cast<int>(seen.size()) == v.size());
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == v.size() - 1);
}

TEST_CASE("build_vocab: a word seen only in one form still gets both ids") {
    std::vector<Utterance> utts{{"<CHI>", {"lamp"}, Form::kEnv}};
    DualVocab v = DualVocab::build(utts, 1);
    CHECK(v.has_word("lamp"));
    CHECK(v.entry("lamp").env_id != v.entry("lamp").lan_id);
}

TEST_CASE("build_vocab: rebuilding the same corpus is identical") {
    auto utts = tiny_corpus();
    DualVocab a = DualVocab::build(utts, 1);
    DualVocab b = DualVocab::build(utts, 1);
    CHECK(a.size() == b.size());
    for (const auto &[word, e] : a.entries()) {
        CHECK(b.entry(word).env_id == e.env_id);
        CHECK(b.entry(word).lan_id == e.lan_id);
    }
    for (const auto &[name, id] : a.specials()) CHECK(b.special(name) == id);
}

TEST_CASE("build_vocab: empty corpus is an error; min_count filters") {
    CHECK_THROWS_AS(DualVocab::build({}, 1), std::invalid_argument);
    std::vector<Utterance> utts{{"<CHI>", {"rare"}, Form::kLan},
                                {"<CHI>", {"common", "common"}, Form::kLan}};
    DualVocab v = DualVocab::build(utts, 2);
    CHECK(v.has_word("common"));
    CHECK_FALSE(v.has_word("rare"));
}

TEST_CASE("tokenize_corpus: padding and chunk arithmetic") {
    std::vector<Utterance> utts{{"<CHI>", {"a", "b", "c"}, Form::kLan}};
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 8);
    REQUIRE(chunks.size() == 1);
    REQUIRE(chunks[0].tokens.size() == 8);
    int pads = 0;
    for (int t : chunks[0].tokens) pads += t == v.pad_id() ? 1 : 0;
    CHECK(pads == 4);  // role + 3 words, then 4 pads
    CHECK(chunks[0].tokens[0] == v.special("<CHI>"));
}

TEST_CASE("tokenize_corpus: ceil split with the tail padded") {
    // 1030-token stream: role + 1029 words
    std::vector<Utterance> utts{{"<CHI>", std::vector<std::string>(1029, "word"), Form::kLan}};
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 512);
    REQUIRE(chunks.size() == 3);
    int pads = 0;
    for (int t : chunks[2].tokens) pads += t == v.pad_id() ? 1 : 0;
    CHECK(pads == 506);
}

TEST_CASE("tokenize_corpus: OOV words route to the form-matched unknown id") {
    std::vector<Utterance> train{{"<CHI>", {"known"}, Form::kLan}};
    DualVocab v = DualVocab::build(train, 1);
    std::vector<Utterance> with_oov{{"<CHI>", {"mystery"}, Form::kLan},
                                    {"<CHI>", {"mystery"}, Form::kEnv}};
    auto chunks = tokenize_corpus(with_oov, v, 8);
    CHECK(chunks[0].tokens[1] == v.special(DualVocab::kUnkLan));
    CHECK(chunks[0].tokens[3] == v.special(DualVocab::kUnkEnv));
}

TEST_CASE("tokenization round trip preserves words and form tags") {
    auto utts = tiny_corpus();
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 64);

    std::vector<std::string> expect;
    for (const Utterance &u : utts) {
        expect.push_back(u.role);
        for (const auto &w : u.words) {
            expect.push_back(w + (u.form == Form::kEnv ? ":ENV" : ":LAN"));
        }
    }
    std::vector<std::string> got;
    for (const auto &c : chunks) {
        for (int t : c.tokens) {
            if (t != v.pad_id()) got.push_back(v.token_name(t));
        }
    }
    CHECK(got == expect);
}

TEST_CASE("tokenization never crosses forms on a generated corpus") {
    Rng rng(5);
    std::vector<std::string> words;
    for (int i = 0; i < 50; ++i) words.push_back("w" + std::to_string(i));
    std::vector<Utterance> utts;
    for (int i = 0; i < 400; ++i) {
        Utterance u;
        u.role = i % 2 == 0 ? "<CHI>" : "<MOT>";
        u.form = rng.below(2) == 0 ? Form::kEnv : Form::kLan;
        const size_t len = 1 + rng.below(6);
        for (size_t j = 0; j < len; ++j) {
            u.words.push_back(words[rng.below(words.size())]);
        }
        utts.push_back(std::move(u));
    }
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 128);

    // every emitted content token carries the form of its source utterance
    size_t pos = 0;
    std::vector<int> flat;
    for (const auto &c : chunks) {
        for (int t : c.tokens) {
            if (t != v.pad_id()) flat.push_back(t);
        }
    }
    long non_pad = 0;
    for (const Utterance &u : utts) {
        CHECK(flat[pos++] == v.special(u.role));
        for (const auto &w : u.words) {
            const std::string &name = v.token_name(flat[pos++]);
            const bool is_env = name.ends_with(":ENV");
            CHECK(is_env == (u.form == Form::kEnv));
            CHECK(name.substr(0, name.size() - 4) == w);
        }
        non_pad += 1 + static_cast<long>(u.words.size());
    }
    // chunk count and conservation of non-pad tokens
    CHECK(chunks.size() == (static_cast<size_t>(non_pad) + 127) / 128);
    CHECK(static_cast<long>(flat.size()) == non_pad);
}

TEST_CASE("count_cooccurrence: single-chunk cases") {
    std::vector<Utterance> utts{{"<CHI>", {"book"}, Form::kEnv},
                                {"<CHI>", {"book"}, Form::kLan},
                                {"<CHI>", {"toy"}, Form::kEnv}};
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 32);
    std::vector<std::string> words{"book", "toy"};
    auto counts = count_cooccurrence(chunks, v, words);
    CHECK(counts["book"] == 1);
    CHECK(counts["toy"] == 0);

    std::vector<std::string> missing{"ghost"};
    CHECK_THROWS_WITH_AS(count_cooccurrence(chunks, v, missing), doctest::Contains("ghost"),
                         std::invalid_argument);
}

TEST_CASE("count_cooccurrence matches a brute-force scan on random chunks") {
    Rng rng(11);
    std::vector<std::string> words;
    for (int i = 0; i < 20; ++i) words.push_back("n" + std::to_string(i));
    std::vector<Utterance> seed_utts;
    for (const auto &w : words) {
        seed_utts.push_back({"<CHI>", {w}, Form::kEnv});
        seed_utts.push_back({"<CHI>", {w}, Form::kLan});
    }
    DualVocab v = DualVocab::build(seed_utts, 1);

    std::vector<CorpusChunk> chunks(100);
    for (auto &c : chunks) {
        c.tokens.resize(40);
        for (auto &t : c.tokens) t = static_cast<int>(rng.below(static_cast<uint64_t>(v.size())));
    }
    auto counts = count_cooccurrence(chunks, v, words);

    for (const auto &w : words) {
        long expected = 0;
        for (const auto &c : chunks) {
            bool env = false, lan = false;
            for (int t : c.tokens) {
                if (t == v.entry(w).env_id) env = true;
                if (t == v.entry(w).lan_id) lan = true;
            }
            expected += env && lan ? 1 : 0;
        }
        CHECK(counts[w] == expected);
    }
}

TEST_CASE("instantiate: match and mismatch differ in exactly the FILLER slot") {
    auto utts = tiny_corpus();
    DualVocab v = DualVocab::build(utts, 1);
    ContextTemplate t;
    t.target = "book";
    t.template_id = 0;
    t.prefix_words = {"<CHI>", "takes:ENV", "from:ENV", "mother:ENV"};
    t.suffix_words = {"<CHI>", "i:LAN", "love:LAN", "this:LAN"};

    auto match = instantiate(t, "book", v);
    auto mismatch = instantiate(t, "toy", v);
    REQUIRE(match.size() == static_cast<size_t>(t.length()));
    REQUIRE(match.size() == mismatch.size());
    int diffs = 0;
    for (size_t i = 0; i < match.size(); ++i) diffs += match[i] != mismatch[i] ? 1 : 0;
    CHECK(diffs == 1);
    CHECK(match[static_cast<size_t>(t.filler_pos())] == v.entry("book").env_id);
    CHECK(mismatch[static_cast<size_t>(t.filler_pos())] == v.entry("toy").env_id);

    CHECK(instantiate(t, "book", v) == match);  // purity
    CHECK_THROWS_AS(instantiate(t, "unseen", v), std::invalid_argument);
}

TEST_CASE("vocab file round trips") {
    auto utts = tiny_corpus();
    DualVocab v = DualVocab::build(utts, 1);
    auto path = temp_file("vocab.tsv");
    v.save(path.string());
    DualVocab u = DualVocab::load(path.string());
    CHECK(u.size() == v.size());
    for (const auto &[word, e] : v.entries()) {
        CHECK(u.entry(word).env_id == e.env_id);
        CHECK(u.entry(word).lan_id == e.lan_id);
    }
    for (const auto &[name, id] : v.specials()) CHECK(u.special(name) == id);
    std::filesystem::remove(path);
}

TEST_CASE("chunk file round trips") {
    auto utts = tiny_corpus();
    DualVocab v = DualVocab::build(utts, 1);
    auto chunks = tokenize_corpus(utts, v, 16);
    auto path = temp_file("chunks.bin");
    save_chunks(path.string(), chunks, 16);
    int len = 0;
    auto loaded = load_chunks(path.string(), &len);
    CHECK(len == 16);
    REQUIRE(loaded.size() == chunks.size());
    for (size_t i = 0; i < chunks.size(); ++i) CHECK(loaded[i].tokens == chunks[i].tokens);
    std::filesystem::remove(path);
}

TEST_CASE("template file round trips") {
    ContextTemplate t;
    t.target = "*";
    t.template_id = 3;
    t.prefix_words = {"<CHI>", "asked:ENV", "for:ENV", "a:ENV", "new:ENV"};
    t.suffix_words = {"<CHI>", "i:LAN", "love:LAN", "this:LAN"};
    auto path = temp_file("templates.jsonl");
    std::vector<ContextTemplate> ts{t};
    save_templates(path.string(), ts);
    auto loaded = load_templates(path.string());
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].target == "*");
    CHECK(loaded[0].template_id == 3);
    CHECK(loaded[0].prefix_words == t.prefix_words);
    CHECK(loaded[0].suffix_words == t.suffix_words);
    std::filesystem::remove(path);
}

TEST_CASE("select_target_words honors both-form frequency and top-k order") {
    std::map<std::string, WordFreq> freq;
    freq["ball"] = {200, 150};
    freq["book"] = {300, 120};
    freq["rare"] = {5, 500};      // env too rare
    freq["offlist"] = {400, 400}; // not in inventory
    std::vector<std::string> inventory{"ball", "book", "rare", "cup"};
    auto words = select_target_words(freq, inventory, 100, 10);
    REQUIRE(words.size() == 2);
    CHECK(words[0] == "book");
    CHECK(words[1] == "ball");
}
