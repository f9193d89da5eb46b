/* Host-side primitives: serialized timestamps and the portable scalar kernel. */
#define _POSIX_C_SOURCE 199309L
#include <stddef.h>
#include <stdint.h>
#include <time.h>

int mb_has_hw_counter(void)
{
#if defined(__aarch64__) || defined(__x86_64__)
    return 1;
#else
    return 0;
#endif
}

/* Prior loads/stores complete before the counter is sampled. */
uint64_t mb_hw_counter(void)
{
#if defined(__aarch64__)
    uint64_t v;
    __asm__ __volatile__("dsb sy\n\tisb\n\tmrs %0, cntvct_el0" : "=r"(v) : : "memory");
    return v;
#elif defined(__x86_64__)
    uint32_t lo, hi;
    __asm__ __volatile__("mfence\n\tlfence\n\trdtsc" : "=a"(lo), "=d"(hi) : : "memory");
    return ((uint64_t)hi << 32) | lo;
#else
    return 0;
#endif
}

/* 0 when the architecture does not expose the counter frequency. */
uint64_t mb_hw_counter_freq(void)
{
#if defined(__aarch64__)
    uint64_t f;
    __asm__ __volatile__("mrs %0, cntfrq_el0" : "=r"(f));
    return f;
#else
    return 0;
#endif
}

uint64_t mb_fenced_monotonic_ns(void)
{
    struct timespec ts;
    __atomic_thread_fence(__ATOMIC_SEQ_CST);
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
}

/*
 * Eight independent accumulators, element i of the stream feeds
 * accumulator i % 8.  Accumulation order per accumulator is sequential
 * so results are bit-reproducible by a scalar re-computation.
 */
void mb_scalar_sum(const double *buf, size_t n_bytes, size_t passes, double *acc_out)
{
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    double a4 = 0.0, a5 = 0.0, a6 = 0.0, a7 = 0.0;
    const size_t n = n_bytes / sizeof(double);
    for (size_t p = 0; p < passes; ++p) {
        for (size_t i = 0; i < n; i += 8) {
            a0 += buf[i];
            a1 += buf[i + 1];
            a2 += buf[i + 2];
            a3 += buf[i + 3];
            a4 += buf[i + 4];
            a5 += buf[i + 5];
            a6 += buf[i + 6];
            a7 += buf[i + 7];
        }
    }
    acc_out[0] = a0; acc_out[1] = a1; acc_out[2] = a2; acc_out[3] = a3;
    acc_out[4] = a4; acc_out[5] = a5; acc_out[6] = a6; acc_out[7] = a7;
}
