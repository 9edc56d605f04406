#pragma once

// Shared plumbing: error types, seeded RNG, deterministic sharding, logging,
// and little-endian binary IO used by the model/patch codecs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ddsfl {

// ---------------------------------------------------------------------------
// Errors

// Bad input data: files, manifests, malformed artifacts.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: non-finite values, impossible solves.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched dimensions between operands.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Logging (DDSFL_LOG=error|info|debug, default info)

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel& log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("DDSFL_LOG");
        if (env == nullptr) return LogLevel::info;
        std::string_view v(env);
        if (v == "error") return LogLevel::error;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

inline void log_at(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    const char* tag = lvl == LogLevel::error ? "error" : (lvl == LogLevel::info ? "info" : "debug");
    std::fprintf(stderr, "[ddsfl %s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_at(LogLevel::error, msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, msg); }

// ---------------------------------------------------------------------------
// RNG: mt19937_64 with hand-rolled draws so sequences depend only on the seed.

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling to kill modulo bias.
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<std::int64_t>(x % un);
    }

    // Box-Muller, cosine branch only.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    // Sample k distinct indices from [0, n), ascending order.
    std::vector<int> sample_indices(std::int64_t n, std::int64_t k) {
        if (k >= n) {
            std::vector<int> all(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);
            return all;
        }
        // Floyd's algorithm, then sort for a canonical order.
        std::vector<int> picked;
        picked.reserve(static_cast<std::size_t>(k));
        std::vector<bool> in(static_cast<std::size_t>(n), false);
        for (std::int64_t j = n - k; j < n; ++j) {
            std::int64_t t = uniform_int(j + 1);
            if (in[static_cast<std::size_t>(t)]) t = j;
            in[static_cast<std::size_t>(t)] = true;
            picked.push_back(static_cast<int>(t));
        }
        std::sort(picked.begin(), picked.end());
        return picked;
    }

private:
    std::mt19937_64 gen_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stable per-stage seed derivation: independent streams from one master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(master ^ fnv1a64(tag));
    h = splitmix64(h ^ splitmix64(a + 0x9e3779b97f4a7c15ULL));
    h = splitmix64(h ^ splitmix64(b + 0x7f4a7c159e3779b9ULL));
    return h;
}

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is cut into shards whose boundaries depend
// only on n, never on the thread count; callers combine per-shard results in
// shard order so outputs are byte-identical for any --threads value.

inline int& thread_budget_ref() {
    static int budget = [] {
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return budget;
}

inline int thread_budget() { return thread_budget_ref(); }
inline void set_thread_budget(int n) { thread_budget_ref() = n < 1 ? 1 : n; }

struct Shard {
    std::int64_t begin;
    std::int64_t end;
};

inline std::vector<Shard> make_shards(std::int64_t n, int max_shards = 64, std::int64_t min_size = 1) {
    std::vector<Shard> shards;
    if (n <= 0) return shards;
    if (min_size < 1) min_size = 1;
    std::int64_t size = (n + max_shards - 1) / max_shards;
    if (size < min_size) size = min_size;
    for (std::int64_t b = 0; b < n; b += size) {
        shards.push_back({b, std::min(n, b + size)});
    }
    return shards;
}

// Runs fn(shard_index, begin, end) over all shards on up to thread_budget() threads.
template <typename Fn>
inline void parallel_shards(const std::vector<Shard>& shards, Fn&& fn) {
    const int nthreads = std::min<int>(thread_budget(), static_cast<int>(shards.size()));
    if (nthreads <= 1) {
        for (std::size_t s = 0; s < shards.size(); ++s) fn(s, shards[s].begin, shards[s].end);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int t = 0; t < nthreads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t s = next.fetch_add(1);
                if (s >= shards.size()) return;
                try {
                    fn(s, shards[s].begin, shards[s].end);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

// Convenience: parallel loop over n independent items writing to distinct slots.
template <typename Fn>
inline void parallel_for_each_index(std::int64_t n, Fn&& fn) {
    auto shards = make_shards(n, 4 * std::max(1, thread_budget()));
    parallel_shards(shards, [&](std::size_t, std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) fn(i);
    });
}

// ---------------------------------------------------------------------------
// Little-endian binary IO on byte buffers.

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i32(std::int32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    const std::vector<std::uint8_t>& bytes() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (fp == nullptr) throw DataError("cannot open `" + path + "`");
    std::fseek(fp, 0, SEEK_END);
    const long size = std::ftell(fp);
    std::fseek(fp, 0, SEEK_SET);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size < 0 ? 0 : size));
    if (!buf.empty() && std::fread(buf.data(), 1, buf.size(), fp) != buf.size()) {
        std::fclose(fp);
        throw DataError("read failed for `" + path + "`");
    }
    std::fclose(fp);
    return buf;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const void* data, std::size_t size) {
    const std::string tmp = path + ".tmp";
    std::FILE* fp = std::fopen(tmp.c_str(), "wb");
    if (fp == nullptr) throw DataError("cannot write `" + tmp + "`");
    if (size > 0 && std::fwrite(data, 1, size, fp) != size) {
        std::fclose(fp);
        std::remove(tmp.c_str());
        throw DataError("write failed for `" + tmp + "`");
    }
    if (std::fclose(fp) != 0) {
        std::remove(tmp.c_str());
        throw DataError("close failed for `" + tmp + "`");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw DataError("rename failed for `" + path + "`");
    }
}

inline void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_file_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v) : data_(v.data()), size_(v.size()) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    std::int32_t i32() { return take<std::int32_t>(); }
    float f32() { return take<float>(); }
    double f64() { return take<double>(); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    void raw(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }
    std::size_t remaining() const { return size_ - pos_; }
    bool at_end() const { return pos_ == size_; }

private:
    template <typename T>
    T take() {
        T v;
        raw(&v, sizeof(T));
        return v;
    }
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw DataError("truncated model file");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace ddsfl
