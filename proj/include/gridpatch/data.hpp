#pragma once

// Daily renewable maximum-output series: CSV I/O, a seeded synthetic
// generator, and chronological windowing into forecaster samples.

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridpatch/tensor.hpp"

namespace gridpatch {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// days x units matrix of available maximum output, MW.
struct RenewableSeries {
    std::size_t num_units = 0;
    std::size_t num_days = 0;
    std::vector<double> values;

    double at(std::size_t day, std::size_t unit) const { return values[day * num_units + unit]; }
    double& at(std::size_t day, std::size_t unit) { return values[day * num_units + unit]; }
    std::vector<double> row(std::size_t day) const {
        return {values.begin() + static_cast<std::ptrdiff_t>(day * num_units),
                values.begin() + static_cast<std::ptrdiff_t>((day + 1) * num_units)};
    }
    /// Rows [first, first + count) as a count x units tensor.
    Tensor block(std::size_t first, std::size_t count) const {
        if (first + count > num_days) throw DataError("series block past the last day");
        return Tensor(Shape{count, num_units},
                      std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(first * num_units),
                                          values.begin() + static_cast<std::ptrdiff_t>((first + count) * num_units)));
    }

    friend bool operator==(const RenewableSeries&, const RenewableSeries&) = default;
};

inline void validate(const RenewableSeries& s) {
    if (s.num_units < 1) throw DataError("series: at least one unit required");
    if (s.values.size() != s.num_units * s.num_days) throw DataError("series: value count does not match days x units");
    for (std::size_t i = 0; i < s.values.size(); ++i)
        if (!std::isfinite(s.values[i]) || s.values[i] < 0.0)
            throw DataError("series: invalid value at day " + std::to_string(i / s.num_units));
}

// ---------------------------------------------------------------------------
// CSV: header `day,unit_1,...,unit_n`, then one row per day.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline bool parse_double(const std::string& text, double& out) {
    if (text.empty()) return false;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc{} && ptr == last && std::isfinite(out);
}

}  // namespace detail

inline RenewableSeries load_series(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::ios_base::failure("series: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "day") throw DataError(path + ": row 1: header must be day,unit_1,...");
    for (std::size_t i = 1; i < header.size(); ++i)
        if (header[i] != "unit_" + std::to_string(i))
            throw DataError(path + ": row 1: expected column unit_" + std::to_string(i) + ", found '" + header[i] + "'");

    RenewableSeries s;
    s.num_units = header.size() - 1;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError(path + ": row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                            " cells, found " + std::to_string(cells.size()));
        double day = 0.0;
        if (!detail::parse_double(cells[0], day))
            throw DataError(path + ": row " + std::to_string(row) + ": non-numeric day '" + cells[0] + "'");
        for (std::size_t i = 1; i < cells.size(); ++i) {
            double v = 0.0;
            if (!detail::parse_double(cells[i], v))
                throw DataError(path + ": row " + std::to_string(row) + ": non-numeric cell '" + cells[i] + "'");
            if (v < 0.0)
                throw DataError(path + ": row " + std::to_string(row) + ": negative value in " + header[i]);
            s.values.push_back(v);
        }
        ++s.num_days;
    }
    if (s.num_days == 0) throw DataError(path + ": no data rows");
    return s;
}

inline void save_series(const std::string& path, const RenewableSeries& s) {
    validate(s);
    std::ofstream out(path);
    if (!out) throw std::ios_base::failure("series: cannot open " + path + " for writing");
    out << "day";
    for (std::size_t u = 0; u < s.num_units; ++u) out << ",unit_" << (u + 1);
    out << '\n';
    char buf[64];
    for (std::size_t d = 0; d < s.num_days; ++d) {
        out << d;
        for (std::size_t u = 0; u < s.num_units; ++u) {
            auto [end, ec] = std::to_chars(buf, buf + sizeof buf, s.at(d, u));
            out << ',' << std::string_view(buf, static_cast<std::size_t>(end - buf));
        }
        out << '\n';
    }
    if (!out) throw std::ios_base::failure("series: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthProfile {
    double capacity_min_mw = 40.0;
    double capacity_max_mw = 90.0;
    double mean_level = 0.5;          ///< fraction of capacity
    double seasonal_amplitude = 0.25; ///< annual sinusoid, fraction of capacity
    double weekly_amplitude = 0.05;
    double noise_std = 0.08;          ///< stationary std of the AR(1) noise, fraction of capacity
    double noise_ar = 0.6;            ///< lag-1 autocorrelation of the noise
    double noise_common_share = 0.5;  ///< variance share common to all units
    double lull_probability = 0.01;   ///< per-day chance a system-wide lull starts
    std::size_t lull_min_days = 2;
    std::size_t lull_max_days = 6;
    double lull_depth = 0.6;          ///< output multiplier drop during a lull
};

inline constexpr std::size_t kMinSynthDays = 200;

/// Per-unit series = capacity * (level + annual sinusoid + weekly ripple + AR(1) noise),
/// scaled down during occasional multi-day lulls and clipped at zero.
inline RenewableSeries synth_series(std::uint64_t seed, std::size_t num_units, std::size_t num_days,
                                    const SynthProfile& p = {}) {
    if (num_days < kMinSynthDays) throw DataError("synth_series: need at least 200 days");
    if (num_units < 1) throw DataError("synth_series: need at least one unit");
    if (!(p.noise_ar > -1.0 && p.noise_ar < 1.0)) throw DataError("synth_series: noise_ar must lie in (-1,1)");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<double> capacity(num_units), annual_phase(num_units), weekly_phase(num_units);
    for (std::size_t u = 0; u < num_units; ++u) {
        capacity[u] = p.capacity_min_mw + (p.capacity_max_mw - p.capacity_min_mw) * uni(rng);
        annual_phase[u] = 2.0 * std::numbers::pi * (0.15 * uni(rng) - 0.075);
        weekly_phase[u] = 2.0 * std::numbers::pi * uni(rng);
    }

    const double innovation = std::sqrt(1.0 - p.noise_ar * p.noise_ar);
    const double common_w = std::sqrt(p.noise_common_share);
    const double own_w = std::sqrt(1.0 - p.noise_common_share);
    double common = gauss(rng);
    std::vector<double> own(num_units);
    for (auto& e : own) e = gauss(rng);

    RenewableSeries s;
    s.num_units = num_units;
    s.num_days = num_days;
    s.values.resize(num_units * num_days);
    std::size_t lull_left = 0;
    for (std::size_t d = 0; d < num_days; ++d) {
        if (d > 0) {
            common = p.noise_ar * common + innovation * gauss(rng);
            for (auto& e : own) e = p.noise_ar * e + innovation * gauss(rng);
        }
        if (lull_left == 0 && uni(rng) < p.lull_probability) {
            const auto span = p.lull_max_days - p.lull_min_days + 1;
            lull_left = std::min(p.lull_max_days, p.lull_min_days + static_cast<std::size_t>(uni(rng) * static_cast<double>(span)));
        }
        const bool in_lull = lull_left > 0;
        if (in_lull) --lull_left;
        const double dd = static_cast<double>(d);
        for (std::size_t u = 0; u < num_units; ++u) {
            double level = p.mean_level +
                           p.seasonal_amplitude * std::sin(2.0 * std::numbers::pi * dd / 365.0 + annual_phase[u]) +
                           p.weekly_amplitude * std::sin(2.0 * std::numbers::pi * dd / 7.0 + weekly_phase[u]) +
                           p.noise_std * (common_w * common + own_w * own[u]);
            if (in_lull) level *= 1.0 - p.lull_depth;
            s.at(d, u) = std::max(0.0, capacity[u] * level);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Time codes and windows

inline constexpr std::size_t kTimeCodeDim = 4;

/// (sin annual phase, cos annual phase, day-of-month, weekday), the last two in [-0.5, 0.5].
/// Day 0 is 1 January of a 365-day calendar and a Monday.
inline std::array<double, kTimeCodeDim> time_code(std::size_t day) {
    static constexpr std::array<int, 12> month_len{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    const std::size_t doy = day % 365;
    std::size_t rest = doy, mlen = 31;
    for (int m : month_len) {
        mlen = static_cast<std::size_t>(m);
        if (rest < mlen) break;
        rest -= mlen;
    }
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(doy) / 365.0;
    return {std::sin(phase), std::cos(phase), static_cast<double>(rest) / static_cast<double>(mlen - 1) - 0.5,
            static_cast<double>(day % 7) / 6.0 - 0.5};
}

inline Tensor time_codes(std::size_t first_day, std::size_t count) {
    Tensor t(Shape{count, kTimeCodeDim});
    for (std::size_t i = 0; i < count; ++i) {
        const auto c = time_code(first_day + i);
        for (std::size_t j = 0; j < kTimeCodeDim; ++j) t(i, j) = c[j];
    }
    return t;
}

struct WindowSample {
    std::size_t start = 0;     ///< first encoder day
    Tensor encoder_input;      ///< input_len x units
    Tensor decoder_known;      ///< decoder_len x units, suffix of encoder_input
    Tensor target;             ///< horizon x units, the days right after encoder_input
    Tensor encoder_time;       ///< input_len x 4
    Tensor decoder_time;       ///< (decoder_len + horizon) x 4

    std::size_t input_len() const { return encoder_input.dim(0); }
    std::size_t horizon() const { return target.dim(0); }
    /// Day index of the last observed day (the issue time of a forecast made from this window).
    std::size_t issue_day() const { return start + input_len() - 1; }
};

struct WindowConfig {
    std::size_t input_len = 56;
    std::size_t decoder_len = 28;
    std::size_t horizon = 15;
    double train_fraction = 0.9;
};

inline std::size_t window_count(std::size_t num_days, const WindowConfig& c) {
    const std::size_t span = c.input_len + c.horizon;
    return num_days >= span ? num_days - span + 1 : 0;
}

inline WindowSample make_window(const RenewableSeries& s, std::size_t start, const WindowConfig& c) {
    WindowSample w;
    w.start = start;
    w.encoder_input = s.block(start, c.input_len);
    w.decoder_known = s.block(start + c.input_len - c.decoder_len, c.decoder_len);
    w.target = s.block(start + c.input_len, c.horizon);
    w.encoder_time = time_codes(start, c.input_len);
    w.decoder_time = time_codes(start + c.input_len - c.decoder_len, c.decoder_len + c.horizon);
    return w;
}

inline void check_window_config(const WindowConfig& c) {
    if (c.input_len == 0 || c.horizon == 0 || c.decoder_len == 0)
        throw DataError("windows: lengths must be positive");
    if (c.decoder_len > c.input_len) throw DataError("windows: decoder history longer than encoder input");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw DataError("windows: train fraction must lie in (0,1)");
}

/// Every window in time order.
inline std::vector<WindowSample> enumerate_windows(const RenewableSeries& s, const WindowConfig& c) {
    check_window_config(c);
    const std::size_t n = window_count(s.num_days, c);
    if (n == 0)
        throw DataError("windows: series of " + std::to_string(s.num_days) + " days is shorter than input + horizon (" +
                        std::to_string(c.input_len + c.horizon) + ")");
    std::vector<WindowSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_window(s, i, c));
    return out;
}

struct WindowSplit {
    std::size_t boundary_day = 0;  ///< first test-period day
    std::vector<WindowSample> train;
    std::vector<WindowSample> test;
};

inline std::size_t split_boundary(std::size_t num_days, double train_fraction) {
    return static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(num_days)));
}

/// Chronological split at the boundary day: train targets end before it, test
/// targets start at or after it. Windows whose target straddles the boundary are dropped.
inline WindowSplit make_windows(const RenewableSeries& s, const WindowConfig& c) {
    check_window_config(c);
    if (window_count(s.num_days, c) == 0)
        throw DataError("windows: series of " + std::to_string(s.num_days) + " days is shorter than input + horizon (" +
                        std::to_string(c.input_len + c.horizon) + ")");
    WindowSplit split;
    split.boundary_day = split_boundary(s.num_days, c.train_fraction);
    const std::size_t n = window_count(s.num_days, c);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t target_begin = i + c.input_len, target_end = target_begin + c.horizon;
        if (target_end <= split.boundary_day)
            split.train.push_back(make_window(s, i, c));
        else if (target_begin >= split.boundary_day)
            split.test.push_back(make_window(s, i, c));
    }
    return split;
}

}  // namespace gridpatch
