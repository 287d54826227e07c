#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wecolora/rng.hpp"
#include "wecolora/tensor.hpp"

namespace wecolora {

struct Dataset {
    std::vector<Tensor> images;  // each [channels x H x W], values in [-1, 1]
    std::vector<int> labels;     // empty for unlabeled data

    bool labeled() const { return !labels.empty(); }
    std::size_t size() const { return images.size(); }
};

// Class c is an oriented sinusoidal grating: angle pi*c/C, frequency (2+c)
// cycles per image width, amplitude 1, plus N(0, sigma^2) noise clamped to
// [-1, 1]. Labels are assigned round-robin (balanced to within 1).
inline Dataset generate_synthetic(int n, int num_classes, std::uint64_t seed,
                                  double sigma = 0.25, int image_size = 32) {
    if (num_classes < 2 || n < num_classes)
        throw ConfigError("synthetic dataset needs n >= C >= 2, got n=" + std::to_string(n) +
                          " C=" + std::to_string(num_classes));
    Rng rng(seed);
    Dataset ds;
    ds.images.reserve(static_cast<std::size_t>(n));
    ds.labels.reserve(static_cast<std::size_t>(n));
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < n; ++i) {
        const int c = i % num_classes;
        const double angle = pi * c / num_classes;
        const double freq = 2.0 + c;
        const double ca = std::cos(angle), sa = std::sin(angle);
        Tensor img({1, image_size, image_size});
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                const double u = (x + 0.5) / image_size;
                const double v = (y + 0.5) / image_size;
                double val = std::sin(2.0 * pi * freq * (u * ca + v * sa));
                val += sigma * rng.normal();
                img.data()[static_cast<std::size_t>(y) * image_size + x] =
                    static_cast<float>(std::clamp(val, -1.0, 1.0));
            }
        ds.images.push_back(std::move(img));
        ds.labels.push_back(c);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// PNM (PGM/PPM) image I/O
// ---------------------------------------------------------------------------

struct PnmImage {
    int width = 0, height = 0, channels = 0, maxval = 0;
    std::vector<int> pixels;  // row-major, channel-interleaved
};

namespace detail {

inline int pnm_next_int(std::istream& in, const std::string& path) {
    // skips whitespace and '#' comments
    for (;;) {
        int ch = in.peek();
        if (ch == EOF) throw DataError("pnm: unexpected end of " + path);
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
            continue;
        }
        if (std::isspace(ch)) {
            in.get();
            continue;
        }
        break;
    }
    int value = 0;
    if (!(in >> value)) throw DataError("pnm: expected integer in " + path);
    return value;
}

}  // namespace detail

inline PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("pnm: cannot open " + path);
    char p = 0, kind = 0;
    in.get(p);
    in.get(kind);
    if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6'))
        throw DataError("pnm: unsupported format in " + path);
    PnmImage img;
    img.channels = (kind == '3' || kind == '6') ? 3 : 1;
    img.width = detail::pnm_next_int(in, path);
    img.height = detail::pnm_next_int(in, path);
    img.maxval = detail::pnm_next_int(in, path);
    if (img.width < 1 || img.height < 1 || img.maxval < 1 || img.maxval > 65535)
        throw DataError("pnm: bad dimensions or maxval in " + path);
    const std::size_t count =
        static_cast<std::size_t>(img.width) * img.height * img.channels;
    img.pixels.resize(count);
    if (kind == '2' || kind == '3') {
        for (std::size_t i = 0; i < count; ++i) img.pixels[i] = detail::pnm_next_int(in, path);
    } else {
        in.get();  // single whitespace after maxval
        const int bytes_per = img.maxval > 255 ? 2 : 1;
        std::vector<unsigned char> buf(count * static_cast<std::size_t>(bytes_per));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (static_cast<std::size_t>(in.gcount()) != buf.size())
            throw DataError("pnm: truncated pixel data in " + path);
        for (std::size_t i = 0; i < count; ++i)
            img.pixels[i] = bytes_per == 1
                                ? buf[i]
                                : (static_cast<int>(buf[2 * i]) << 8) | buf[2 * i + 1];
    }
    for (int v : img.pixels)
        if (v < 0 || v > img.maxval) throw DataError("pnm: pixel out of range in " + path);
    return img;
}

// Scales to [-1, 1] (0 -> -1, maxval -> +1), converts channel count, and
// resizes to the target square size by nearest neighbor.
inline Tensor pnm_to_tensor(const PnmImage& img, int target_size, int target_channels) {
    Tensor out({target_channels, target_size, target_size});
    for (int y = 0; y < target_size; ++y) {
        const int sy = std::min(img.height - 1, y * img.height / target_size);
        for (int x = 0; x < target_size; ++x) {
            const int sx = std::min(img.width - 1, x * img.width / target_size);
            const std::size_t base =
                (static_cast<std::size_t>(sy) * img.width + sx) * static_cast<std::size_t>(img.channels);
            for (int c = 0; c < target_channels; ++c) {
                double v;
                if (img.channels == target_channels) {
                    v = img.pixels[base + static_cast<std::size_t>(c)];
                } else if (img.channels == 3 && target_channels == 1) {
                    v = (img.pixels[base] + img.pixels[base + 1] + img.pixels[base + 2]) / 3.0;
                } else {
                    v = img.pixels[base];  // replicate single channel
                }
                out.data()[(static_cast<std::size_t>(c) * target_size + y) * target_size + x] =
                    static_cast<float>(2.0 * v / img.maxval - 1.0);
            }
        }
    }
    return out;
}

// Plain (P2) PGM writer; values are scaled so the maximum maps to maxval.
inline void write_pgm(const std::string& path, const Tensor& values, int maxval = 255) {
    if (values.ndim() != 2) throw ContractError("write_pgm: tensor is not 2-D");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("pgm: cannot open " + path + " for writing");
    const int h = values.rows(), w = values.cols();
    float mx = 0.0f;
    for (std::size_t i = 0; i < values.size(); ++i) mx = std::max(mx, values.data()[i]);
    std::fprintf(f, "P2\n%d %d\n%d\n", w, h, maxval);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float v = std::max(0.0f, values.at(y, x));
            const int q = mx > 0.0f ? static_cast<int>(std::lround(v / mx * maxval)) : 0;
            std::fprintf(f, "%d%c", q, x + 1 == w ? '\n' : ' ');
        }
    }
    if (std::fclose(f) != 0) throw DataError("pgm: write failed for " + path);
}

// Loads a directory of PGM/PPM files in filename order. labels.csv
// (filename,label) is read only when want_labels is set; without it the
// result is an image-only view usable by the label-free distillation loop.
inline Dataset load_image_dir(const std::string& dir, int image_size, int channels,
                              bool want_labels) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ConfigError("load_image_dir: not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("load_image_dir: no PGM/PPM files in " + dir);

    std::map<std::string, int> label_map;
    if (want_labels) {
        const fs::path csv = fs::path(dir) / "labels.csv";
        std::ifstream in(csv);
        if (!in) throw ConfigError("load_image_dir: labels required but " + csv.string() + " missing");
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const std::size_t comma = line.find(',');
            if (comma == std::string::npos)
                throw DataError("labels.csv: malformed line " + std::to_string(line_no) + " in " +
                                csv.string());
            const std::string name = line.substr(0, comma);
            const std::string value = line.substr(comma + 1);
            try {
                label_map[name] = std::stoi(value);
            } catch (const std::exception&) {
                if (line_no == 1 && name == "filename") continue;  // tolerated header
                throw DataError("labels.csv: bad label on line " + std::to_string(line_no) +
                                " in " + csv.string());
            }
        }
    }

    Dataset ds;
    for (const std::string& file : files) {
        ds.images.push_back(pnm_to_tensor(read_pnm(file), image_size, channels));
        if (want_labels) {
            const std::string name = fs::path(file).filename().string();
            auto it = label_map.find(name);
            if (it == label_map.end())
                throw ConfigError("load_image_dir: no label for " + name + " in labels.csv");
            ds.labels.push_back(it->second);
        }
    }
    return ds;
}

}  // namespace wecolora
