#include "dwiseg/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

namespace dwiseg {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
    std::int32_t sizeof_hdr;  // must be 348
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

template <typename T>
void swap_bytes(T& value) {
    auto* p = reinterpret_cast<unsigned char*>(&value);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

void swap_header(NiftiHeader& h) {
    swap_bytes(h.sizeof_hdr);
    swap_bytes(h.extents);
    swap_bytes(h.session_error);
    for (auto& d : h.dim) swap_bytes(d);
    swap_bytes(h.intent_p1);
    swap_bytes(h.intent_p2);
    swap_bytes(h.intent_p3);
    swap_bytes(h.intent_code);
    swap_bytes(h.datatype);
    swap_bytes(h.bitpix);
    swap_bytes(h.slice_start);
    for (auto& p : h.pixdim) swap_bytes(p);
    swap_bytes(h.vox_offset);
    swap_bytes(h.scl_slope);
    swap_bytes(h.scl_inter);
    swap_bytes(h.slice_end);
    swap_bytes(h.cal_max);
    swap_bytes(h.cal_min);
    swap_bytes(h.slice_duration);
    swap_bytes(h.toffset);
    swap_bytes(h.glmax);
    swap_bytes(h.glmin);
    swap_bytes(h.qform_code);
    swap_bytes(h.sform_code);
    swap_bytes(h.quatern_b);
    swap_bytes(h.quatern_c);
    swap_bytes(h.quatern_d);
    swap_bytes(h.qoffset_x);
    swap_bytes(h.qoffset_y);
    swap_bytes(h.qoffset_z);
    for (auto& s : h.srow_x) swap_bytes(s);
    for (auto& s : h.srow_y) swap_bytes(s);
    for (auto& s : h.srow_z) swap_bytes(s);
}

struct GzReader {
    gzFile f = nullptr;
    std::string path;
    explicit GzReader(const std::string& p) : path(p) {
        // gzread handles plain (uncompressed) files transparently.
        f = gzopen(p.c_str(), "rb");
        if (!f) throw IoError("cannot open " + p);
    }
    ~GzReader() {
        if (f) gzclose(f);
    }
    void read(void* dst, std::size_t n) {
        std::size_t done = 0;
        auto* out = static_cast<unsigned char*>(dst);
        while (done < n) {
            const unsigned chunk =
                static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
            const int got = gzread(f, out + done, chunk);
            if (got <= 0) throw FormatError("truncated NIfTI file: " + path);
            done += static_cast<std::size_t>(got);
        }
    }
    void skip(std::size_t n) {
        std::vector<char> buf(std::min<std::size_t>(n, 1 << 16));
        std::size_t left = n;
        while (left > 0) {
            const std::size_t chunk = std::min(left, buf.size());
            read(buf.data(), chunk);
            left -= chunk;
        }
    }
};

struct Raw {
    NiftiHeader hdr{};
    bool swapped = false;
    std::array<int, 3> dims{};
    int channels = 1;
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    std::vector<unsigned char> bytes;  // raw voxel bytes, native order after swap
};

Eigen::Matrix4d affine_from_qform(const NiftiHeader& h) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double a2 = 1.0 - (b * b + c * c + d * d);
    const double a = a2 > 0.0 ? std::sqrt(a2) : 0.0;
    Eigen::Matrix3d r;
    r << a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c,
        2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b,
        2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c;
    const double qfac = (h.pixdim[0] < 0.0f) ? -1.0 : 1.0;
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    for (int i = 0; i < 3; ++i) {
        m(i, 0) = r(i, 0) * h.pixdim[1];
        m(i, 1) = r(i, 1) * h.pixdim[2];
        m(i, 2) = r(i, 2) * h.pixdim[3] * qfac;
    }
    m(0, 3) = h.qoffset_x;
    m(1, 3) = h.qoffset_y;
    m(2, 3) = h.qoffset_z;
    return m;
}

Raw read_raw(const std::string& path) {
    GzReader in(path);
    Raw raw;
    in.read(&raw.hdr, sizeof(NiftiHeader));
    NiftiHeader& h = raw.hdr;
    if (h.sizeof_hdr != 348) {
        swap_header(h);
        raw.swapped = true;
        if (h.sizeof_hdr != 348)
            throw FormatError("malformed NIfTI header (sizeof_hdr != 348): " + path);
    }
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        throw FormatError("bad NIfTI magic in " + path);
    if (std::strncmp(h.magic, "ni1", 3) == 0)
        throw UnsupportedError("two-file NIfTI (.hdr/.img) not supported: " + path);

    int bytes_per_voxel = 0;
    switch (h.datatype) {
        case kDtUint8: bytes_per_voxel = 1; break;
        case kDtInt16: bytes_per_voxel = 2; break;
        case kDtInt32: bytes_per_voxel = 4; break;
        case kDtFloat32: bytes_per_voxel = 4; break;
        case kDtFloat64: bytes_per_voxel = 8; break;
        default:
            throw UnsupportedError("unsupported NIfTI datatype " + std::to_string(h.datatype) +
                                   ": " + path);
    }

    const int ndim = h.dim[0];
    if (ndim < 1 || ndim > 7) throw FormatError("invalid dim[0] in " + path);
    for (int i = 0; i < 3; ++i) raw.dims[i] = (i < ndim) ? std::max<int>(1, h.dim[i + 1]) : 1;
    raw.channels = 1;
    for (int i = 4; i <= ndim; ++i) raw.channels *= std::max<int>(1, h.dim[i]);

    if (h.sform_code > 0) {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        for (int j = 0; j < 4; ++j) {
            m(0, j) = h.srow_x[j];
            m(1, j) = h.srow_y[j];
            m(2, j) = h.srow_z[j];
        }
        raw.affine = m;
    } else if (h.qform_code > 0) {
        raw.affine = affine_from_qform(h);
    } else {
        raw.affine = scaling_affine(std::max(1e-6f, h.pixdim[1]), std::max(1e-6f, h.pixdim[2]),
                                    std::max(1e-6f, h.pixdim[3]));
    }

    const std::size_t offset = static_cast<std::size_t>(h.vox_offset);
    if (offset < sizeof(NiftiHeader)) throw FormatError("vox_offset inside header: " + path);
    in.skip(offset - sizeof(NiftiHeader));

    const std::size_t count = static_cast<std::size_t>(raw.dims[0]) * raw.dims[1] * raw.dims[2] *
                              static_cast<std::size_t>(raw.channels);
    raw.bytes.resize(count * bytes_per_voxel);
    in.read(raw.bytes.data(), raw.bytes.size());
    if (raw.swapped && bytes_per_voxel > 1) {
        for (std::size_t i = 0; i < count; ++i) {
            unsigned char* p = raw.bytes.data() + i * bytes_per_voxel;
            for (int j = 0; j < bytes_per_voxel / 2; ++j)
                std::swap(p[j], p[bytes_per_voxel - 1 - j]);
        }
    }
    return raw;
}

template <typename Src, typename Dst>
void convert(const std::vector<unsigned char>& bytes, std::vector<Dst>& out, double slope,
             double inter) {
    const Src* src = reinterpret_cast<const Src*>(bytes.data());
    const std::size_t n = bytes.size() / sizeof(Src);
    out.resize(n);
    if (slope == 0.0) {
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<Dst>(src[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<Dst>(slope * static_cast<double>(src[i]) + inter);
    }
}

struct GzWriter {
    gzFile gz = nullptr;
    std::ofstream plain;
    std::string path;
    GzWriter(const std::string& p, bool compressed) : path(p) {
        if (compressed) {
            gz = gzopen(p.c_str(), "wb");
            if (!gz) throw IoError("cannot open for writing: " + p);
        } else {
            plain.open(p, std::ios::binary | std::ios::trunc);
            if (!plain) throw IoError("cannot open for writing: " + p);
        }
    }
    ~GzWriter() {
        if (gz) gzclose(gz);
    }
    void write(const void* src, std::size_t n) {
        if (gz) {
            std::size_t done = 0;
            const auto* in = static_cast<const unsigned char*>(src);
            while (done < n) {
                const unsigned chunk =
                    static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
                if (gzwrite(gz, in + done, chunk) != static_cast<int>(chunk))
                    throw IoError("write failed: " + path);
                done += chunk;
            }
        } else {
            plain.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
            if (!plain) throw IoError("write failed: " + path);
        }
    }
};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

NiftiHeader make_header(const std::array<int, 3>& dims, int channels,
                        const std::array<double, 3>& voxel_size, const Eigen::Matrix4d& affine,
                        std::int16_t datatype, std::int16_t bitpix) {
    NiftiHeader h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = static_cast<std::int16_t>(channels > 1 ? 4 : 3);
    h.dim[1] = static_cast<std::int16_t>(dims[0]);
    h.dim[2] = static_cast<std::int16_t>(dims[1]);
    h.dim[3] = static_cast<std::int16_t>(dims[2]);
    h.dim[4] = static_cast<std::int16_t>(channels > 1 ? channels : 1);
    for (int i = 5; i < 8; ++i) h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(voxel_size[i]);
    h.pixdim[4] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // NIFTI_UNITS_MM
    h.qform_code = 0;
    h.sform_code = 1;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = static_cast<float>(affine(0, j));
        h.srow_y[j] = static_cast<float>(affine(1, j));
        h.srow_z[j] = static_cast<float>(affine(2, j));
    }
    std::memcpy(h.magic, "n+1\0", 4);
    return h;
}

void write_file(const std::string& path, const NiftiHeader& h, const void* data,
                std::size_t nbytes) {
    GzWriter out(path, ends_with(path, ".gz"));
    out.write(&h, sizeof(NiftiHeader));
    const char extender[4] = {0, 0, 0, 0};
    out.write(extender, 4);
    out.write(data, nbytes);
}

}  // namespace

Volume read_volume(const std::string& path) {
    Raw raw = read_raw(path);
    Volume v;
    v.dims = raw.dims;
    v.channels = raw.channels;
    v.affine = raw.affine;
    v.voxel_size = voxel_size_from_affine(raw.affine);
    const double slope = raw.hdr.scl_slope;
    const double inter = raw.hdr.scl_inter;
    switch (raw.hdr.datatype) {
        case kDtUint8: convert<std::uint8_t>(raw.bytes, v.data, slope, inter); break;
        case kDtInt16: convert<std::int16_t>(raw.bytes, v.data, slope, inter); break;
        case kDtInt32: convert<std::int32_t>(raw.bytes, v.data, slope, inter); break;
        case kDtFloat32: convert<float>(raw.bytes, v.data, slope, inter); break;
        case kDtFloat64: convert<double>(raw.bytes, v.data, slope, inter); break;
        default: break;  // unreachable, read_raw already validated
    }
    validate(v);
    return v;
}

LabelVolume read_labels(const std::string& path) {
    Raw raw = read_raw(path);
    if (raw.channels != 1) throw FormatError("label volume must be single-channel: " + path);
    LabelVolume v;
    v.dims = raw.dims;
    v.affine = raw.affine;
    v.voxel_size = voxel_size_from_affine(raw.affine);
    // scl_slope/inter intentionally ignored for integer label maps.
    switch (raw.hdr.datatype) {
        case kDtUint8: convert<std::uint8_t>(raw.bytes, v.labels, 0.0, 0.0); break;
        case kDtInt16: convert<std::int16_t>(raw.bytes, v.labels, 0.0, 0.0); break;
        case kDtInt32: convert<std::int32_t>(raw.bytes, v.labels, 0.0, 0.0); break;
        default:
            throw UnsupportedError("label volume requires an integer datatype: " + path);
    }
    complete_label_table(v);
    validate(v);
    return v;
}

void write_volume(const Volume& v, const std::string& path) {
    validate(v);
    if (v.dims[0] > 32767 || v.dims[1] > 32767 || v.dims[2] > 32767 || v.channels > 32767)
        throw ValidationError("dims exceed NIfTI-1 int16 range");
    const NiftiHeader h = make_header(v.dims, v.channels, v.voxel_size, v.affine, kDtFloat32, 32);
    write_file(path, h, v.data.data(), v.data.size() * sizeof(float));
}

void write_labels(const LabelVolume& v, const std::string& path) {
    validate(v);
    const NiftiHeader h = make_header(v.dims, 1, v.voxel_size, v.affine, kDtInt32, 32);
    write_file(path, h, v.labels.data(), v.labels.size() * sizeof(std::int32_t));
}

}  // namespace dwiseg
