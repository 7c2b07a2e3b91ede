#include "diver/recording.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace diver {

void Recording::validate() const {
    if (sample_rate <= 0.0)
        throw RecordingError("recording: sample rate must be positive");
    if (channel_labels.size() != samples.size())
        throw RecordingError("recording: label/channel count mismatch");
    std::set<std::string> seen;
    for (const auto& l : channel_labels) {
        if (!seen.insert(l).second)
            throw RecordingError("recording: duplicate channel label '" + l + "'");
    }
    for (const auto& ch : samples) {
        if (ch.size() != samples[0].size())
            throw RecordingError("recording: channels have unequal lengths");
    }
}

namespace {

constexpr char kMagic[4] = {'D', 'R', 'F', '1'};

template <typename T>
void write_le(std::ostream& os, T v) {
    // Host is little-endian on every supported target.
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw RecordingError("DRF: truncated file");
    return v;
}

}  // namespace

void write_drf(const std::string& path, const Recording& rec) {
    rec.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RecordingError("DRF: cannot open for writing: " + path);
    os.write(kMagic, 4);
    write_le<uint32_t>(os, static_cast<uint32_t>(rec.channels()));
    write_le<double>(os, rec.sample_rate);
    for (const auto& l : rec.channel_labels) {
        write_le<uint32_t>(os, static_cast<uint32_t>(l.size()));
        os.write(l.data(), static_cast<std::streamsize>(l.size()));
    }
    write_le<uint64_t>(os, static_cast<uint64_t>(rec.num_samples()));
    for (const auto& ch : rec.samples) {
        for (double v : ch) write_le<float>(os, static_cast<float>(v));
    }
    if (!os) throw RecordingError("DRF: write failed: " + path);
}

Recording read_drf(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RecordingError("DRF: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw RecordingError("DRF: bad magic in " + path);
    Recording rec;
    uint32_t nch = read_le<uint32_t>(is);
    rec.sample_rate = read_le<double>(is);
    for (uint32_t i = 0; i < nch; ++i) {
        uint32_t len = read_le<uint32_t>(is);
        std::string label(len, '\0');
        is.read(label.data(), len);
        if (!is) throw RecordingError("DRF: truncated label in " + path);
        rec.channel_labels.push_back(std::move(label));
    }
    uint64_t n = read_le<uint64_t>(is);
    rec.samples.assign(nch, std::vector<double>(n));
    for (uint32_t c = 0; c < nch; ++c) {
        for (uint64_t t = 0; t < n; ++t)
            rec.samples[c][t] = read_le<float>(is);
    }
    rec.validate();
    return rec;
}

Recording read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw RecordingError("CSV: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw RecordingError("CSV: empty file " + path);
    Recording rec;
    {
        std::stringstream ss(line);
        std::string cell;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first) {
                first = false;  // time column
            } else {
                rec.channel_labels.push_back(cell);
            }
        }
    }
    if (rec.channel_labels.empty())
        throw RecordingError("CSV: no channel columns in " + path);
    rec.samples.assign(rec.channel_labels.size(), {});
    std::vector<double> times;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            double v = std::stod(cell);
            if (col == 0)
                times.push_back(v);
            else if (col - 1 < rec.samples.size())
                rec.samples[col - 1].push_back(v);
            ++col;
        }
    }
    if (times.size() < 2) throw RecordingError("CSV: need at least 2 rows");
    rec.sample_rate = 1.0 / (times[1] - times[0]);
    rec.validate();
    return rec;
}

Recording read_recording(const std::string& path) {
    auto dot = path.find_last_of('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    if (ext == ".csv") return read_csv(path);
    return read_drf(path);
}

}  // namespace diver
