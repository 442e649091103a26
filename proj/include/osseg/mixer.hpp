#pragma once

// Class-mixed intermediate samples: pixels of the sampled classes come from a
// pseudo-target donor, everything else from a source acceptor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/image.hpp"
#include "osseg/rng.hpp"

namespace osseg {

struct SampledClassSet {
    std::vector<std::uint8_t> classes;  // ascending
    std::size_t drawn_from = 0;

    bool contains(std::uint8_t c) const { return std::binary_search(classes.begin(), classes.end(), c); }
};

struct SampleMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;  // 0 or 1

    bool operator==(const SampleMask&) const = default;
};

// The acceptor's pseudo-label is carried separately from its ground truth.
struct MixPair {
    const DomainSample& donor;
    const DomainSample& acceptor;
    const LabelMap* acceptor_pseudo_label = nullptr;
};

// Uniformly draws ceil(k/2) of the k distinct non-ignore classes in `label`.
inline SampledClassSet sample_classes(const LabelMap& label, Rng& rng, std::size_t drawn_from = 0) {
    const auto present = label.present_classes();
    if (present.empty()) throw ValidationError("sample_classes: label contains no non-ignore class");
    SampledClassSet out;
    out.drawn_from = drawn_from;
    std::sample(present.begin(), present.end(), std::back_inserter(out.classes), (present.size() + 1) / 2, rng);
    std::sort(out.classes.begin(), out.classes.end());
    return out;
}

inline SampleMask build_mask(const LabelMap& label, const SampledClassSet& classes) {
    SampleMask m{label.height, label.width, std::vector<std::uint8_t>(label.ids.size(), 0)};
    for (std::size_t p = 0; p < label.ids.size(); ++p) {
        const auto v = label.ids[p];
        m.bits[p] = v != kIgnoreLabel && classes.contains(v);
    }
    return m;
}

namespace detail {

inline DomainSample mix_with_labels(const MixPair& pair, const SampleMask& mask, const LabelMap& acceptor_label) {
    const auto& donor = pair.donor;
    const auto& acceptor = pair.acceptor;
    if (donor.tag != DomainTag::kPseudoTarget || acceptor.tag != DomainTag::kSource) {
        throw ContractError("mix: donor must be PSEUDO_TARGET and acceptor SOURCE");
    }
    const std::size_t h = donor.image.height, w = donor.image.width;
    check_same_size(donor.image, donor.label, "mix donor");
    check_same_size(acceptor.image, acceptor_label, "mix acceptor");
    if (acceptor.image.height != h || acceptor.image.width != w || mask.height != h || mask.width != w) {
        throw DimensionError("mix: donor, acceptor and mask sizes differ");
    }
    DomainSample out;
    out.tag = DomainTag::kIntermediate;
    out.image = Image(h, w);
    out.label = LabelMap(h, w);
    for (std::size_t p = 0; p < h * w; ++p) {
        const bool take = mask.bits[p] != 0;
        const Image& from = take ? donor.image : acceptor.image;
        for (std::size_t c = 0; c < 3; ++c) out.image.pixels[p * 3 + c] = from.pixels[p * 3 + c];
        out.label.ids[p] = take ? donor.label.ids[p] : acceptor_label.ids[p];
    }
    return out;
}

}  // namespace detail

// x_m = m * donor + (1 - m) * acceptor; labels from the donor label where
// m = 1 and the acceptor's pseudo-label elsewhere.
inline DomainSample mix(const MixPair& pair, const SampleMask& mask) {
    if (!pair.acceptor_pseudo_label) throw ContractError("mix: acceptor has no pseudo-label attached");
    return detail::mix_with_labels(pair, mask, *pair.acceptor_pseudo_label);
}

// Same selection as mix, but labels the acceptor side with its ground truth.
inline DomainSample mix_with_ground_truth(const MixPair& pair, const SampleMask& mask) {
    return detail::mix_with_labels(pair, mask, pair.acceptor.label);
}

}  // namespace osseg
