// SPDX-License-Identifier: Apache-2.0
#include "checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sg {
namespace {

constexpr uint32_t kMagic = 0x4b434753u;  // "SGCK"
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename U>
void put(std::ostream &os, U v) {
    os.write(reinterpret_cast<const char *>(&v), sizeof(U));
}

template <typename U>
U get(std::istream &is) {
    U v{};
    is.read(reinterpret_cast<char *>(&v), sizeof(U));
    if (!is) throw std::runtime_error("checkpoint file truncated");
    return v;
}

void put_string(std::ostream &os, const std::string &s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream &is) {
    const uint32_t n = get<uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint file truncated");
    return s;
}

void put_floats(std::ostream &os, const std::vector<float> &v) {
    os.write(reinterpret_cast<const char *>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void get_floats(std::istream &is, std::vector<float> &v, size_t n) {
    v.resize(n);
    is.read(reinterpret_cast<char *>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint file truncated");
}

void put_config(std::ostream &os, const ModelConfig &c) {
    put<uint32_t>(os, c.arch == Arch::kTransformer ? 0u : 1u);
    put<uint32_t>(os, static_cast<uint32_t>(c.layers));
    put<uint32_t>(os, static_cast<uint32_t>(c.heads));
    put<uint32_t>(os, static_cast<uint32_t>(c.hidden));
    put<uint32_t>(os, static_cast<uint32_t>(c.vocab));
    put<uint32_t>(os, static_cast<uint32_t>(c.max_len));
    put<uint64_t>(os, c.seed);
}

ModelConfig get_config(std::istream &is) {
    ModelConfig c;
    c.arch = get<uint32_t>(is) == 0 ? Arch::kTransformer : Arch::kLstm;
    c.layers = static_cast<int>(get<uint32_t>(is));
    c.heads = static_cast<int>(get<uint32_t>(is));
    c.hidden = static_cast<int>(get<uint32_t>(is));
    c.vocab = static_cast<int>(get<uint32_t>(is));
    c.max_len = static_cast<int>(get<uint32_t>(is));
    c.seed = get<uint64_t>(is);
    return c;
}

}  // namespace

uint64_t fnv1a64(const std::string &s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

CheckpointRecord make_checkpoint(const Model<float> &model, uint64_t fingerprint, uint64_t step,
                                 const std::vector<std::vector<float>> &m1,
                                 const std::vector<std::vector<float>> &m2,
                                 const Rng::State &rng_state) {
    CheckpointRecord c;
    c.fingerprint = fingerprint;
    c.step = step;
    c.config = model.config();
    for (const auto &p : model.params()) {
        c.names.push_back(p.name);
        c.shapes.emplace_back(p.rows, p.cols);
        c.weights.push_back(p.w);
    }
    c.moment1 = m1;
    c.moment2 = m2;
    c.rng_state = rng_state;
    return c;
}

void save_checkpoint(const std::string &path, const CheckpointRecord &ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    put<uint32_t>(os, kMagic);
    put<uint32_t>(os, kVersion);
    put<uint64_t>(os, ckpt.fingerprint);
    put<uint64_t>(os, ckpt.step);
    put_config(os, ckpt.config);
    put<uint32_t>(os, static_cast<uint32_t>(ckpt.names.size()));
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        put_string(os, ckpt.names[i]);
        put<uint32_t>(os, static_cast<uint32_t>(ckpt.shapes[i].first));
        put<uint32_t>(os, static_cast<uint32_t>(ckpt.shapes[i].second));
        put_floats(os, ckpt.weights[i]);
    }
    const uint8_t has_moments = ckpt.moment1.empty() ? 0 : 1;
    put<uint8_t>(os, has_moments);
    if (has_moments) {
        for (const auto &m : ckpt.moment1) put_floats(os, m);
        for (const auto &m : ckpt.moment2) put_floats(os, m);
    }
    for (uint64_t wdd : ckpt.rng_state.words) put<uint64_t>(os, wdd);
    put<double>(os, ckpt.rng_state.spare);
    put<uint8_t>(os, ckpt.rng_state.has_spare);
    if (!os) throw std::runtime_error("write failed: " + path);
}

CheckpointRecord load_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    if (get<uint32_t>(is) != kMagic) throw IntegrityError("not a checkpoint file: " + path);
    if (get<uint32_t>(is) != kVersion) throw IntegrityError("unsupported checkpoint version");
    CheckpointRecord c;
    c.fingerprint = get<uint64_t>(is);
    c.step = get<uint64_t>(is);
    c.config = get_config(is);
    const uint32_t n = get<uint32_t>(is);
    c.names.resize(n);
    c.shapes.resize(n);
    c.weights.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        c.names[i] = get_string(is);
        const uint32_t rows = get<uint32_t>(is);
        const uint32_t cols = get<uint32_t>(is);
        c.shapes[i] = {static_cast<int>(rows), static_cast<int>(cols)};
        get_floats(is, c.weights[i], static_cast<size_t>(rows) * cols);
    }
    const uint8_t has_moments = get<uint8_t>(is);
    if (has_moments) {
        c.moment1.resize(n);
        c.moment2.resize(n);
        for (uint32_t i = 0; i < n; ++i) get_floats(is, c.moment1[i], c.weights[i].size());
        for (uint32_t i = 0; i < n; ++i) get_floats(is, c.moment2[i], c.weights[i].size());
    }
    for (uint64_t &wrd : c.rng_state.words) wrd = get<uint64_t>(is);
    c.rng_state.spare = get<double>(is);
    c.rng_state.has_spare = get<uint8_t>(is);
    return c;
}

CheckpointInfo peek_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    if (get<uint32_t>(is) != kMagic) throw IntegrityError("not a checkpoint file: " + path);
    if (get<uint32_t>(is) != kVersion) throw IntegrityError("unsupported checkpoint version");
    CheckpointInfo info;
    info.fingerprint = get<uint64_t>(is);
    info.step = get<uint64_t>(is);
    return info;
}

}  // namespace sg
