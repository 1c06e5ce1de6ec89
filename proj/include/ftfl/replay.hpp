#pragma once

// Ring-buffer transition storage, uniform sampling, prefix reveal for
// pseudo-online probing, and the binary dump format.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ftfl/error.hpp"
#include "ftfl/nn.hpp"

namespace ftfl {

struct Transition {
    Vec state;
    Vec action;
    double reward = 0.0;
    Vec next_state;
    bool terminal = false;
};

/// Column-per-sample view of many transitions.
struct TransitionBatch {
    Mat states;       // d_s x n
    Mat actions;      // d_a x n
    Vec rewards;      // n
    Mat next_states;  // d_s x n
    Vec terminals;    // n, values in {0, 1}

    TransitionBatch() = default;
    TransitionBatch(std::size_t d_s, std::size_t d_a, std::size_t n)
        : states(Mat::Zero(static_cast<Eigen::Index>(d_s), static_cast<Eigen::Index>(n))),
          actions(Mat::Zero(static_cast<Eigen::Index>(d_a), static_cast<Eigen::Index>(n))),
          rewards(Vec::Zero(static_cast<Eigen::Index>(n))),
          next_states(Mat::Zero(static_cast<Eigen::Index>(d_s), static_cast<Eigen::Index>(n))),
          terminals(Vec::Zero(static_cast<Eigen::Index>(n))) {}

    std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }

    Transition at(std::size_t i) const {
        const auto c = static_cast<Eigen::Index>(i);
        return Transition{states.col(c), actions.col(c), rewards[c], next_states.col(c), terminals[c] != 0.0};
    }

    void set(std::size_t i, const Transition& t) {
        const auto c = static_cast<Eigen::Index>(i);
        states.col(c) = t.state;
        actions.col(c) = t.action;
        rewards[c] = t.reward;
        next_states.col(c) = t.next_state;
        terminals[c] = t.terminal ? 1.0 : 0.0;
    }

    /// Copies column `src_col` of `src` into column `dst_col`.
    void copy_column(std::size_t dst_col, const TransitionBatch& src, std::size_t src_col) {
        const auto d = static_cast<Eigen::Index>(dst_col), s = static_cast<Eigen::Index>(src_col);
        states.col(d) = src.states.col(s);
        actions.col(d) = src.actions.col(s);
        rewards[d] = src.rewards[s];
        next_states.col(d) = src.next_states.col(s);
        terminals[d] = src.terminals[s];
    }
};

class ReplayBuffer {
public:
    ReplayBuffer(std::size_t state_dim, std::size_t action_dim, std::size_t capacity)
        : d_s_(state_dim), d_a_(action_dim), capacity_(capacity) {
        if (capacity == 0) throw ConfigError("replay: capacity must be >= 1");
        if (state_dim == 0 || action_dim == 0) throw ConfigError("replay: dims must be >= 1");
    }

    std::size_t state_dim() const { return d_s_; }
    std::size_t action_dim() const { return d_a_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return size_; }
    std::size_t record_width() const { return 2 * d_s_ + d_a_ + 2; }
    bool empty() const { return size_ == 0; }

    /// Number of transitions visible to sampling and fitting.
    std::size_t effective_size() const { return revealed_ ? *revealed_ : size_; }
    std::optional<std::size_t> revealed_limit() const { return revealed_; }

    void push(const Transition& t) {
        if (static_cast<std::size_t>(t.state.size()) != d_s_ || static_cast<std::size_t>(t.next_state.size()) != d_s_ ||
            static_cast<std::size_t>(t.action.size()) != d_a_)
            throw DimensionError("replay push: transition dims do not match buffer");
        if (!std::isfinite(t.reward)) throw NonFiniteError("replay push: non-finite reward");
        const std::size_t w = record_width();
        std::size_t slot;
        if (size_ < capacity_) {
            slot = (head_ + size_) % capacity_;
            if (data_.size() < (slot + 1) * w) data_.resize((slot + 1) * w);
            ++size_;
        } else {
            slot = head_;
            head_ = (head_ + 1) % capacity_;
        }
        double* rec = data_.data() + slot * w;
        std::copy(t.state.data(), t.state.data() + d_s_, rec);
        std::copy(t.action.data(), t.action.data() + d_a_, rec + d_s_);
        rec[d_s_ + d_a_] = t.reward;
        std::copy(t.next_state.data(), t.next_state.data() + d_s_, rec + d_s_ + d_a_ + 1);
        rec[w - 1] = t.terminal ? 1.0 : 0.0;
    }

    /// Transition by insertion order among survivors (0 = oldest).
    Transition at(std::size_t i) const {
        if (i >= size_) throw std::out_of_range("replay: index out of range");
        const double* rec = record(i);
        Transition t;
        t.state = Eigen::Map<const Vec>(rec, static_cast<Eigen::Index>(d_s_));
        t.action = Eigen::Map<const Vec>(rec + d_s_, static_cast<Eigen::Index>(d_a_));
        t.reward = rec[d_s_ + d_a_];
        t.next_state = Eigen::Map<const Vec>(rec + d_s_ + d_a_ + 1, static_cast<Eigen::Index>(d_s_));
        t.terminal = rec[record_width() - 1] != 0.0;
        return t;
    }

    /// Restricts sampling and fitting to the first k insertions. k must be
    /// at least 1, at most size(), and never decrease across calls.
    void reveal_prefix(std::size_t k) {
        if (k == 0) throw ConfigError("reveal_prefix: k must be >= 1");
        if (k > size_) throw ConfigError("reveal_prefix: k exceeds buffer size");
        if (revealed_ && k < *revealed_) throw ConfigError("reveal_prefix: k must not decrease");
        revealed_ = k;
    }

    template <typename Rng>
    std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
        const std::size_t eff = effective_size();
        if (eff == 0) throw StateError("replay: cannot sample from an empty buffer");
        std::uniform_int_distribution<std::size_t> pick(0, eff - 1);
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = pick(rng);
        return idx;
    }

    /// n uniform draws with replacement from the effective prefix.
    template <typename Rng>
    TransitionBatch sample_batch(std::size_t n, Rng& rng) const {
        return gather(sample_indices(n, rng));
    }

    TransitionBatch gather(const std::vector<std::size_t>& indices) const {
        TransitionBatch b(d_s_, d_a_, indices.size());
        for (std::size_t j = 0; j < indices.size(); ++j) write_column(b, j, indices[j]);
        return b;
    }

    /// Every transition in the effective prefix, in insertion order.
    TransitionBatch all() const {
        const std::size_t n = effective_size();
        TransitionBatch b(d_s_, d_a_, n);
        for (std::size_t j = 0; j < n; ++j) write_column(b, j, j);
        return b;
    }

private:
    const double* record(std::size_t logical) const {
        return data_.data() + ((head_ + logical) % capacity_) * record_width();
    }

    void write_column(TransitionBatch& b, std::size_t col, std::size_t logical) const {
        if (logical >= size_) throw std::out_of_range("replay: index out of range");
        const double* rec = record(logical);
        const auto c = static_cast<Eigen::Index>(col);
        const auto ds = static_cast<Eigen::Index>(d_s_), da = static_cast<Eigen::Index>(d_a_);
        b.states.col(c) = Eigen::Map<const Vec>(rec, ds);
        b.actions.col(c) = Eigen::Map<const Vec>(rec + d_s_, da);
        b.rewards[c] = rec[d_s_ + d_a_];
        b.next_states.col(c) = Eigen::Map<const Vec>(rec + d_s_ + d_a_ + 1, ds);
        b.terminals[c] = rec[record_width() - 1];
    }

    std::size_t d_s_;
    std::size_t d_a_;
    std::size_t capacity_;
    std::size_t size_ = 0;
    std::size_t head_ = 0;  // physical slot of the oldest record
    std::optional<std::size_t> revealed_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Dump format: one ASCII header line
//   FTFL-BUF v1 d_s=<n> d_a=<m> n=<rows>\n
// followed by `rows` records of little-endian float32 laid out
// [s | a | r | s' | d], d in {0.0, 1.0}.

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big)
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    return v;
}

inline void put_f32(std::string& out, double x) {
    const float f = static_cast<float>(x);
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof u);
    u = to_little_endian(u);
    char bytes[4];
    std::memcpy(bytes, &u, 4);
    out.append(bytes, 4);
}

inline double get_f32(const char* p) {
    std::uint32_t u;
    std::memcpy(&u, p, 4);
    u = to_little_endian(u);
    float f;
    std::memcpy(&f, &u, sizeof f);
    return static_cast<double>(f);
}

}  // namespace detail

inline std::string dump_header(std::size_t d_s, std::size_t d_a, std::size_t rows) {
    return "FTFL-BUF v1 d_s=" + std::to_string(d_s) + " d_a=" + std::to_string(d_a) + " n=" + std::to_string(rows) +
           "\n";
}

/// Serializes every stored transition (insertion order) to the dump format.
inline std::string encode_dump(const ReplayBuffer& buffer) {
    std::string out = dump_header(buffer.state_dim(), buffer.action_dim(), buffer.size());
    out.reserve(out.size() + buffer.size() * buffer.record_width() * 4);
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const Transition t = buffer.at(i);
        for (auto v : t.state) detail::put_f32(out, v);
        for (auto v : t.action) detail::put_f32(out, v);
        detail::put_f32(out, t.reward);
        for (auto v : t.next_state) detail::put_f32(out, v);
        detail::put_f32(out, t.terminal ? 1.0 : 0.0);
    }
    return out;
}

inline void write_dump(const ReplayBuffer& buffer, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_dump(buffer);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing " + path.string());
}

/// Parses a dump; capacity is set to the record count.
inline ReplayBuffer decode_dump(const std::string& bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw IoError("buffer dump: missing header line");
    std::istringstream header(bytes.substr(0, nl));
    std::string magic, version, ds_tok, da_tok, n_tok, extra;
    header >> magic >> version >> ds_tok >> da_tok >> n_tok;
    if (magic != "FTFL-BUF" || version != "v1" || (header >> extra))
        throw IoError("buffer dump: bad header '" + bytes.substr(0, nl) + "'");
    auto field = [](const std::string& tok, const std::string& key) -> std::size_t {
        if (tok.rfind(key + "=", 0) != 0) throw IoError("buffer dump: expected " + key + "=<count>");
        const std::string v = tok.substr(key.size() + 1);
        if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }))
            throw IoError("buffer dump: malformed " + key);
        return static_cast<std::size_t>(std::stoull(v));
    };
    const std::size_t d_s = field(ds_tok, "d_s"), d_a = field(da_tok, "d_a"), rows = field(n_tok, "n");
    if (d_s == 0 || d_a == 0) throw IoError("buffer dump: dims must be >= 1");
    const std::size_t width = 2 * d_s + d_a + 2;
    const std::size_t body = bytes.size() - nl - 1;
    if (body != rows * width * 4)
        throw IoError("buffer dump: header declares " + std::to_string(rows) + " records but body holds " +
                      std::to_string(body) + " bytes");
    ReplayBuffer buf(d_s, d_a, std::max<std::size_t>(rows, 1));
    const char* p = bytes.data() + nl + 1;
    Transition t{Vec(static_cast<Eigen::Index>(d_s)), Vec(static_cast<Eigen::Index>(d_a)), 0.0,
                 Vec(static_cast<Eigen::Index>(d_s)), false};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d_s; ++j, p += 4) t.state[static_cast<Eigen::Index>(j)] = detail::get_f32(p);
        for (std::size_t j = 0; j < d_a; ++j, p += 4) t.action[static_cast<Eigen::Index>(j)] = detail::get_f32(p);
        t.reward = detail::get_f32(p);
        p += 4;
        for (std::size_t j = 0; j < d_s; ++j, p += 4) t.next_state[static_cast<Eigen::Index>(j)] = detail::get_f32(p);
        const double d = detail::get_f32(p);
        p += 4;
        if (d != 0.0 && d != 1.0) throw IoError("buffer dump: terminal flag must be 0 or 1");
        t.terminal = d == 1.0;
        buf.push(t);
    }
    return buf;
}

inline ReplayBuffer read_dump(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open buffer dump " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_dump(ss.str());
}

}  // namespace ftfl
