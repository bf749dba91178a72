/*
 * Function-level coverage tracer linked into instrumented harnesses.
 *
 * Build the program with -finstrument-functions and link this file.
 * When DGF_TRACE_OUT names a file, every distinct function entered is
 * appended to it as one hex line: the function address minus the base
 * of the object that contains it. Lines are written with write(2) as
 * soon as a function is first seen, so the trace survives crashes.
 */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <fcntl.h>
#include <stdint.h>
#include <stdlib.h>
#include <unistd.h>

#define DGF_SEEN_SLOTS 8192

static int dgf_trace_fd = -2;
static uintptr_t dgf_seen[DGF_SEEN_SLOTS];

__attribute__((no_instrument_function)) static void dgf_trace_open(void) {
    const char *path = getenv("DGF_TRACE_OUT");

    dgf_trace_fd = -1;
    if (path != NULL && path[0] != '\0')
        dgf_trace_fd = open(path, O_WRONLY | O_CREAT | O_TRUNC | O_APPEND | O_CLOEXEC, 0644);
}

/* Returns 1 when fn was not seen before. A full table reports every hit. */
__attribute__((no_instrument_function)) static int dgf_mark_seen(uintptr_t fn) {
    size_t slot = (size_t)((fn >> 4) * 2654435761u) % DGF_SEEN_SLOTS;
    size_t probes;

    for (probes = 0; probes < DGF_SEEN_SLOTS; probes++) {
        if (dgf_seen[slot] == fn)
            return 0;
        if (dgf_seen[slot] == 0) {
            dgf_seen[slot] = fn;
            return 1;
        }
        slot = (slot + 1) % DGF_SEEN_SLOTS;
    }
    return 1;
}

__attribute__((no_instrument_function)) void __cyg_profile_func_enter(void *fn, void *call_site) {
    static const char digits[] = "0123456789abcdef";
    uintptr_t addr = (uintptr_t)fn;
    uintptr_t base = 0;
    uintptr_t offset;
    Dl_info info;
    char line[2 + sizeof(uintptr_t) * 2 + 1];
    char *p = line + sizeof(line);
    (void)call_site;

    if (dgf_trace_fd == -2)
        dgf_trace_open();
    if (dgf_trace_fd < 0 || !dgf_mark_seen(addr))
        return;
    if (dladdr(fn, &info) != 0 && info.dli_fbase != NULL)
        base = (uintptr_t)info.dli_fbase;
    offset = addr - base;

    *--p = '\n';
    do {
        *--p = digits[offset & 0xf];
        offset >>= 4;
    } while (offset != 0);
    *--p = 'x';
    *--p = '0';
    (void)!write(dgf_trace_fd, p, (size_t)(line + sizeof(line) - p));
}

__attribute__((no_instrument_function)) void __cyg_profile_func_exit(void *fn, void *call_site) {
    (void)fn;
    (void)call_site;
}
