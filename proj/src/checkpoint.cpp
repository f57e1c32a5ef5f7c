#include "gift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "gift/errors.hpp"

namespace gift {

namespace {

constexpr char kMagic[9] = {'G', 'I', 'F', 'T', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw format_error(path + ": truncated while reading " + what);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const auto& shape = t.shape();
        put_u32(os, static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw io_error("write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    char magic[sizeof(kMagic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw format_error(path + ": bad magic, not a model checkpoint");
    const std::uint32_t count = get_u32(is, path, "tensor count");
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(is, path, "name length");
        if (name_len > 4096) throw format_error(path + ": implausible name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw format_error(path + ": truncated tensor name");
        const std::uint32_t rank = get_u32(is, path, "rank");
        if (rank > 8) throw format_error(path + ": implausible tensor rank");
        std::vector<std::int64_t> shape(rank);
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t e = get_u32(is, path, "dimension");
            if (e == 0) throw format_error(path + ": zero dimension in tensor \"" + name + "\"");
            shape[d] = static_cast<std::int64_t>(e);
            numel *= shape[d];
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * sizeof(double))))
            throw format_error(path + ": truncated data for tensor \"" + name + "\"");
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw format_error("checkpoint is missing tensor \"" + name + "\"");
}

bool has_tensor(const NamedTensors& tensors, const std::string& name) {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

} // namespace gift
