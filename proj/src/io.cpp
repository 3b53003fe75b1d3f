#include "rfk/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace rfk::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr float kFloMagic = 202021.25f;
constexpr char kFeatMagic[8] = {'R', 'F', 'K', 'F', 'E', 'A', 'T', '1'};
constexpr float kUnknownFlow = 1e10f;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v)
{
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, const char* what) : bytes_(bytes), what_(what) {}

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            throw FormatError(std::string(what_) + ": truncated file");
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    const char* what_;
    std::size_t pos_ = 0;
};

std::string lower_ext(const fs::path& p)
{
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

fs::path temp_sibling(const fs::path& path)
{
    // The temp name keeps the extension so extension-sniffing writers work.
    return path.parent_path() / (".tmp." + path.filename().string());
}

Image read_png(const fs::path& path)
{
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw FormatError(path.string() + ": " + image.message);

    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
    image.format = (color ? PNG_FORMAT_RGBA : PNG_FORMAT_GA) | (wide ? PNG_FORMAT_FLAG_LINEAR : 0);
    const int comps = color ? 4 : 2;
    const std::size_t count = static_cast<std::size_t>(image.width) * image.height * comps;

    const int channels = color ? 3 : 1;
    Image out(static_cast<int>(image.width), static_cast<int>(image.height), channels);
    auto& dst = out.data();
    if (wide) {
        std::vector<std::uint16_t> buf(count);
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
            throw FormatError(path.string() + ": " + image.message);
        for (std::size_t i = 0, k = 0; i < count; i += comps)
            for (int c = 0; c < channels; ++c)
                dst[k++] = buf[i + c] / 65535.0;
    } else {
        std::vector<std::uint8_t> buf(count);
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
            throw FormatError(path.string() + ": " + image.message);
        for (std::size_t i = 0, k = 0; i < count; i += comps)
            for (int c = 0; c < channels; ++c)
                dst[k++] = buf[i + c] / 255.0;
    }
    return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void write_png_bytes(int width, int height, int channels, const std::vector<std::uint8_t>& pixels, const fs::path& path)
{
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr))
        throw Error(path.string() + ": " + image.message);
    std::vector<std::uint8_t> buf(size);
    if (!png_image_write_to_memory(&image, buf.data(), &size, 0, pixels.data(), 0, nullptr))
        throw Error(path.string() + ": " + image.message);
    buf.resize(size);
    write_bytes_atomic(path, buf);
}

Image read_pnm(const fs::path& path)
{
    const auto bytes = read_bytes(path);
    std::size_t pos = 0;
    auto token = [&]() {
        std::string t;
        while (pos < bytes.size()) {
            const char c = static_cast<char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty())
                    break;
                ++pos;
            } else {
                t.push_back(c);
                ++pos;
            }
        }
        return t;
    };
    const std::string magic = token();
    if (magic != "P5" && magic != "P6")
        throw FormatError(path.string() + ": unsupported PNM variant '" + magic + "'");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed PNM header");
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
        throw FormatError(path.string() + ": malformed PNM header");
    ++pos;  // single whitespace after maxval
    const int channels = magic == "P6" ? 3 : 1;
    const int bpv = maxval > 255 ? 2 : 1;
    const std::size_t n = static_cast<std::size_t>(w) * h * channels;
    if (bytes.size() < pos || bytes.size() - pos < n * bpv)
        throw FormatError(path.string() + ": truncated PNM data");
    Image out(w, h, channels);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = bpv == 1 ? bytes[pos + i] : (bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1];
        out.data()[i] = static_cast<double>(v) / maxval;
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> read_bytes(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes)
{
    const fs::path tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text)
{
    write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Image read_image(const fs::path& path)
{
    if (!fs::exists(path))
        throw Error("no such file: " + path.string());
    const std::string ext = lower_ext(path);
    Image img = (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") ? read_pnm(path) : read_png(path);
    img.clamp01();
    return img;
}

void write_png(const Image& img, const fs::path& path)
{
    std::vector<std::uint8_t> px(img.data().size());
    std::transform(img.data().begin(), img.data().end(), px.begin(), to_byte);
    write_png_bytes(img.width(), img.height(), img.channels(), px, path);
}

void write_ppm(const Image& img, const fs::path& path)
{
    std::string header = (img.channels() == 3 ? "P6\n" : "P5\n") + std::to_string(img.width()) + " " +
                         std::to_string(img.height()) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (double v : img.data())
        bytes.push_back(to_byte(v));
    write_bytes_atomic(path, bytes);
}

void write_image(const Image& img, const fs::path& path)
{
    const std::string ext = lower_ext(path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")
        write_ppm(img, path);
    else
        write_png(img, path);
}

void write_matchability_png(const MatchabilityMap& m, const fs::path& path)
{
    std::vector<std::uint8_t> px(m.values().size());
    std::transform(m.values().begin(), m.values().end(), px.begin(), to_byte);
    write_png_bytes(m.width(), m.height(), 1, px, path);
}

MatchabilityMap read_matchability_png(const fs::path& path)
{
    const Image img = to_gray(read_image(path));
    MatchabilityMap m(img.width(), img.height());
    m.values() = img.data();
    return m;
}

void write_mask_png(const Mask& m, const fs::path& path)
{
    std::vector<std::uint8_t> px(m.values.size());
    std::transform(m.values.begin(), m.values.end(), px.begin(), [](std::uint8_t v) { return std::uint8_t(v ? 255 : 0); });
    write_png_bytes(m.width, m.height, 1, px, path);
}

Mask read_mask_png(const fs::path& path)
{
    const Image img = to_gray(read_image(path));
    Mask m(img.width(), img.height(), false);
    for (std::size_t i = 0; i < m.values.size(); ++i)
        m.values[i] = std::lround(img.data()[i] * 255.0) > 127 ? 1 : 0;
    return m;
}

std::vector<std::uint8_t> encode_flo(const FlowField& flow)
{
    std::vector<std::uint8_t> out;
    out.reserve(12 + static_cast<std::size_t>(flow.width()) * flow.height() * 8);
    put(out, kFloMagic);
    put(out, static_cast<std::int32_t>(flow.width()));
    put(out, static_cast<std::int32_t>(flow.height()));
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x) {
            if (flow.valid(x, y)) {
                const Vec2 d = flow.displacement(x, y);
                put(out, static_cast<float>(d.x));
                put(out, static_cast<float>(d.y));
            } else {
                put(out, kUnknownFlow);
                put(out, kUnknownFlow);
            }
        }
    return out;
}

FlowField decode_flo(const std::vector<std::uint8_t>& bytes)
{
    Reader r(bytes, "flo");
    if (r.get<float>() != kFloMagic)
        throw FormatError("flo: bad magic tag");
    const auto w = r.get<std::int32_t>();
    const auto h = r.get<std::int32_t>();
    if (w < 0 || h < 0 || w > 1 << 20 || h > 1 << 20)
        throw FormatError("flo: implausible dimensions");
    r.need(static_cast<std::size_t>(w) * h * 8);
    FlowField flow(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float dx = r.get<float>();
            const float dy = r.get<float>();
            const bool ok = std::isfinite(dx) && std::isfinite(dy) && std::abs(dx) <= 1e9f && std::abs(dy) <= 1e9f;
            if (ok)
                flow.set(x, y, {x + static_cast<double>(dx), y + static_cast<double>(dy)});
        }
    return flow;
}

void write_flo(const FlowField& flow, const fs::path& path) { write_bytes_atomic(path, encode_flo(flow)); }

FlowField read_flo(const fs::path& path) { return decode_flo(read_bytes(path)); }

std::vector<std::uint8_t> encode_featmap(const FeatureMap& fm)
{
    if (fm.data.size() != static_cast<std::size_t>(fm.grid_w) * fm.grid_h * fm.channels)
        throw InvalidArgument("feature map data length does not match header");
    std::vector<std::uint8_t> out(kFeatMagic, kFeatMagic + 8);
    put(out, static_cast<std::int32_t>(fm.grid_w));
    put(out, static_cast<std::int32_t>(fm.grid_h));
    put(out, static_cast<std::int32_t>(fm.channels));
    put(out, static_cast<std::int32_t>(fm.stride));
    put(out, fm.scale_factor);
    const auto* p = reinterpret_cast<const std::uint8_t*>(fm.data.data());
    out.insert(out.end(), p, p + fm.data.size() * sizeof(float));
    return out;
}

FeatureMap decode_featmap(const std::vector<std::uint8_t>& bytes)
{
    Reader r(bytes, "featmap");
    r.need(8);
    if (!std::equal(kFeatMagic, kFeatMagic + 8, bytes.begin()))
        throw FormatError("featmap: bad magic");
    for (int i = 0; i < 8; ++i)
        r.get<char>();
    FeatureMap fm;
    fm.grid_w = r.get<std::int32_t>();
    fm.grid_h = r.get<std::int32_t>();
    fm.channels = r.get<std::int32_t>();
    fm.stride = r.get<std::int32_t>();
    fm.scale_factor = r.get<float>();
    if (fm.grid_w < 0 || fm.grid_h < 0 || fm.channels < 0 || fm.stride < 1 || !(fm.scale_factor > 0.0f))
        throw FormatError("featmap: invalid header");
    const std::size_t n = static_cast<std::size_t>(fm.grid_w) * fm.grid_h * fm.channels;
    if (r.remaining() != n * sizeof(float))
        throw FormatError("featmap: payload size does not match header");
    fm.data.resize(n);
    for (auto& v : fm.data)
        v = r.get<float>();
    return fm;
}

void write_featmap(const FeatureMap& fm, const fs::path& path) { write_bytes_atomic(path, encode_featmap(fm)); }

FeatureMap read_featmap(const fs::path& path) { return decode_featmap(read_bytes(path)); }

void write_correspondences(const std::vector<Correspondence>& corrs, const fs::path& path)
{
    std::ostringstream os;
    os << std::setprecision(9);
    for (const auto& c : corrs)
        os << c.src.x << ' ' << c.src.y << ' ' << c.tgt.x << ' ' << c.tgt.y << ' ' << c.score << '\n';
    write_text_atomic(path, os.str());
}

std::vector<Correspondence> read_correspondences(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open " + path.string());
    std::vector<Correspondence> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#')
            continue;
        std::istringstream ls(line);
        Correspondence c;
        if (!(ls >> c.src.x >> c.src.y >> c.tgt.x >> c.tgt.y))
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'x_s y_s x_t y_t [score]'");
        if (!(ls >> c.score))
            c.score = 1.0;
        out.push_back(c);
    }
    return out;
}

void write_homography(const Homography& h, const fs::path& path)
{
    std::ostringstream os;
    os << std::setprecision(17);
    for (int r = 0; r < 3; ++r)
        os << h.matrix()(r, 0) << ' ' << h.matrix()(r, 1) << ' ' << h.matrix()(r, 2) << '\n';
    write_text_atomic(path, os.str());
}

Homography read_homography(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open " + path.string());
    Eigen::Matrix3d m;
    for (int i = 0; i < 9; ++i)
        if (!(in >> m(i / 3, i % 3)))
            throw FormatError(path.string() + ": expected 9 numbers");
    return Homography(m);
}

}  // namespace rfk::io
