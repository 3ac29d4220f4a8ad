#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <new>

// Counting allocator shim. Accessors are always available; the actual
// operator new/delete replacement is emitted only in the one TU per binary
// that defines FACTFORMER_DEFINE_ALLOC_TRACKER (benchmark builds).

namespace factformer::alloctrack {

inline std::atomic<std::size_t> current_bytes{0};
inline std::atomic<std::size_t> peak_bytes_v{0};
inline std::atomic<bool> active{false};

inline void note_alloc(std::size_t n) {
    const std::size_t cur = current_bytes.fetch_add(n) + n;
    std::size_t prev = peak_bytes_v.load();
    while (cur > prev && !peak_bytes_v.compare_exchange_weak(prev, cur)) {
    }
}

inline void note_free(std::size_t n) { current_bytes.fetch_sub(n); }

inline void reset_peak() { peak_bytes_v.store(current_bytes.load()); }
inline std::size_t peak_bytes() { return peak_bytes_v.load(); }
inline std::size_t live_bytes() { return current_bytes.load(); }
inline bool tracking_enabled() { return active.load(); }

}  // namespace factformer::alloctrack

#ifdef FACTFORMER_DEFINE_ALLOC_TRACKER

namespace factformer::alloctrack::detail {

// Size is stashed in a 16-byte prefix so delete can report it.
inline void* tracked_alloc(std::size_t n) {
    void* raw = std::malloc(n + 16);
    if (!raw) throw std::bad_alloc();
    *static_cast<std::size_t*>(raw) = n;
    note_alloc(n);
    return static_cast<char*>(raw) + 16;
}

inline void tracked_free(void* p) noexcept {
    if (!p) return;
    char* raw = static_cast<char*>(p) - 16;
    note_free(*reinterpret_cast<std::size_t*>(raw));
    std::free(raw);
}

struct Activate {
    Activate() { active.store(true); }
};
inline Activate activate_on_load;

}  // namespace factformer::alloctrack::detail

void* operator new(std::size_t n) { return factformer::alloctrack::detail::tracked_alloc(n); }
void* operator new[](std::size_t n) { return factformer::alloctrack::detail::tracked_alloc(n); }
void operator delete(void* p) noexcept { factformer::alloctrack::detail::tracked_free(p); }
void operator delete[](void* p) noexcept { factformer::alloctrack::detail::tracked_free(p); }
void operator delete(void* p, std::size_t) noexcept { factformer::alloctrack::detail::tracked_free(p); }
void operator delete[](void* p, std::size_t) noexcept { factformer::alloctrack::detail::tracked_free(p); }

#endif  // FACTFORMER_DEFINE_ALLOC_TRACKER
