#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "ulr/encoder.hpp"
#include "ulr/error.hpp"

namespace ulr {

namespace {

constexpr char kMagic[4] = {'U', 'L', 'R', 'M'};

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    const std::vector<char>& buffer() const noexcept { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) {
            throw IoError("truncated checkpoint");
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        }
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t position() const noexcept { return pos_; }
    void seek(std::size_t pos) { pos_ = pos; }

private:
    const std::vector<char>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const EncoderParams<float>& params, const EncoderConfig& config,
                     const std::filesystem::path& path) {
    config.validate();
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(config.vocab_size));
    w.u32(static_cast<std::uint32_t>(config.d_model));
    w.u32(static_cast<std::uint32_t>(config.n_heads));
    w.u32(static_cast<std::uint32_t>(config.n_layers));
    w.u32(static_cast<std::uint32_t>(config.d_ff));
    w.u32(static_cast<std::uint32_t>(config.max_len));
    w.f64(config.dropout);
    w.u64(config.seed);

    const auto tensors = params.tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u32(static_cast<std::uint32_t>(t.rank));
        if (t.rank == 2) {
            w.u32(static_cast<std::uint32_t>(t.tensor->rows()));
        }
        w.u32(static_cast<std::uint32_t>(t.tensor->cols()));
        w.u64(offset);
        offset += static_cast<std::uint64_t>(t.tensor->size()) * sizeof(float);
    }
    for (const auto& t : tensors) {
        for (Eigen::Index i = 0; i < t.tensor->size(); ++i) {
            w.f32(t.tensor->data()[i]);
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot write checkpoint '{}'", path.string()));
    }
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) {
        throw IoError(fmt::format("failed writing checkpoint '{}'", path.string()));
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open checkpoint '{}'", path.string()));
    }
    const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof kMagic || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError(fmt::format("'{}' is not a ULRM checkpoint", path.string()));
    }
    Reader r(buf);
    r.seek(sizeof kMagic);
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw IoError(fmt::format("unsupported checkpoint version {} (expected {})", version, kCheckpointVersion));
    }
    Checkpoint ck;
    ck.config.vocab_size = r.u32();
    ck.config.d_model = r.u32();
    ck.config.n_heads = r.u32();
    ck.config.n_layers = r.u32();
    ck.config.d_ff = r.u32();
    ck.config.max_len = r.u32();
    ck.config.dropout = r.f64();
    ck.config.seed = r.u64();
    try {
        ck.config.validate();
    } catch (const Error& e) {
        throw IoError(fmt::format("checkpoint config invalid: {}", e.what()));
    }

    ck.params = init_params<float>(ck.config);
    auto tensors = ck.params.tensors();
    const auto count = r.u32();
    if (count != tensors.size()) {
        throw IoError(fmt::format("checkpoint has {} tensors, config implies {}", count, tensors.size()));
    }
    std::vector<std::uint64_t> offsets;
    for (auto& t : tensors) {
        const auto name = r.str(r.u32());
        if (name != t.name) {
            throw IoError(fmt::format("unexpected tensor '{}' (expected '{}')", name, t.name));
        }
        const auto rank = r.u32();
        if (rank != static_cast<std::uint32_t>(t.rank)) {
            throw IoError(fmt::format("shape mismatch for '{}': rank {}", name, rank));
        }
        const std::uint64_t rows = rank == 2 ? r.u32() : 1;
        const std::uint64_t cols = r.u32();
        if (rows != static_cast<std::uint64_t>(t.tensor->rows()) ||
            cols != static_cast<std::uint64_t>(t.tensor->cols())) {
            throw IoError(fmt::format("shape mismatch for '{}': {}x{} vs {}x{}", name, rows, cols,
                                      t.tensor->rows(), t.tensor->cols()));
        }
        offsets.push_back(r.u64());
    }
    const std::size_t payload = r.position();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& m = *tensors[i].tensor;
        r.seek(payload + offsets[i]);
        r.need(static_cast<std::size_t>(m.size()) * sizeof(float));
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            m.data()[k] = r.f32();
        }
    }
    return ck;
}

}  // namespace ulr
